//! The classification network: stacked (SFE, grouping, LSA) stages, a fully
//! connected head, loss, metrics and parameter accounting.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_query_indices, farthest_point_sample, group_all, pad_with_first, subsample, PointCloud, RegionGrouping};
use crate::lsa::{LsaConfig, LsaInput, LsaLayer, LsaOptions, LsaRecord};
use crate::nn::Ctx;
use crate::sfe::{inject_spatial, Combine, SfeStage, SfeStageConfig};
use crate::tensor::{ParamKind, ParamStore, Scalar, Tensor, Var};

/// One backbone stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Centroids per cloud; 1 means group-all.
    #[serde(rename = "N")]
    pub n: usize,
    /// Neighbors per region.
    #[serde(rename = "K")]
    pub k: usize,
    /// Ball-query radius; unused by group-all.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Shared-MLP widths.
    #[serde(rename = "F")]
    pub f: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub use_sfe: bool,
    pub use_lsa: bool,
    pub use_region_encoder: bool,
    pub use_modulated_pool: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            use_sfe: true,
            use_lsa: true,
            use_region_encoder: true,
            use_modulated_pool: true,
        }
    }
}

impl Flags {
    /// Every ablation configuration, by report name.
    pub fn ablations() -> Vec<(&'static str, Flags)> {
        let full = Flags::default();
        vec![
            (
                "baseline",
                Flags {
                    use_sfe: false,
                    use_lsa: false,
                    ..full
                },
            ),
            (
                "baseline+sfe",
                Flags {
                    use_lsa: false,
                    ..full
                },
            ),
            (
                "lsa-no-region-encoder",
                Flags {
                    use_sfe: false,
                    use_region_encoder: false,
                    ..full
                },
            ),
            (
                "lsa-no-pool-modulation",
                Flags {
                    use_sfe: false,
                    use_modulated_pool: false,
                    ..full
                },
            ),
            (
                "lsa",
                Flags {
                    use_sfe: false,
                    ..full
                },
            ),
            ("lsa+sfe", full),
        ]
    }
}

/// Settings outside the architecture table.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub lsa: LsaOptions,
    pub sfe_combine: Combine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// One entry per SFE stage, starting at the first layer.
    pub sfe_lift_widths: Vec<usize>,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub options: ModelOptions,
}

impl NetworkConfig {
    /// Reduced backbone for the 4-class synthetic data.
    pub fn desk() -> Self {
        NetworkConfig {
            layers: vec![
                LayerSpec {
                    n: 128,
                    k: 16,
                    radius: Some(0.2),
                    f: vec![32, 32, 64],
                },
                LayerSpec {
                    n: 32,
                    k: 32,
                    radius: Some(0.4),
                    f: vec![64, 64, 128],
                },
                LayerSpec {
                    n: 1,
                    k: 32,
                    radius: None,
                    f: vec![128, 256, 256],
                },
            ],
            head_widths: vec![512, 256],
            num_classes: 4,
            dropout_rate: 0.4,
            sfe_lift_widths: vec![32, 64],
            flags: Flags::default(),
            options: ModelOptions::default(),
        }
    }

    /// The full-size backbone for 40 classes.
    pub fn modelnet40() -> Self {
        NetworkConfig {
            layers: vec![
                LayerSpec {
                    n: 512,
                    k: 32,
                    radius: Some(0.2),
                    f: vec![64, 64, 128],
                },
                LayerSpec {
                    n: 128,
                    k: 64,
                    radius: Some(0.4),
                    f: vec![128, 128, 256],
                },
                LayerSpec {
                    n: 1,
                    k: 128,
                    radius: None,
                    f: vec![256, 512, 1024],
                },
            ],
            head_widths: vec![512, 256],
            num_classes: 40,
            dropout_rate: 0.4,
            sfe_lift_widths: vec![32, 64],
            flags: Flags::default(),
            options: ModelOptions::default(),
        }
    }

    /// Two-stage network small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        NetworkConfig {
            layers: vec![
                LayerSpec {
                    n: 8,
                    k: 4,
                    radius: Some(0.6),
                    f: vec![4, 4],
                },
                LayerSpec {
                    n: 1,
                    k: 8,
                    radius: None,
                    f: vec![4, 8],
                },
            ],
            head_widths: vec![6],
            num_classes: 3,
            dropout_rate: 0.0,
            sfe_lift_widths: vec![4],
            flags: Flags::default(),
            options: ModelOptions::default(),
        }
    }

    pub fn with_flags(mut self, flags: Flags) -> Self {
        self.flags = flags;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: NetworkConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Points each cloud must provide.
    pub fn input_points(&self) -> usize {
        let first = &self.layers[0];
        if self.layers.len() == 1 {
            first.k
        } else {
            first.n
        }
    }

    /// Rejects the first violated constraint.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return err("at least one layer is required".into());
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.f.is_empty() || l.f.contains(&0) {
                return err(format!("layer {i}: MLP widths must be non-empty and positive"));
            }
            if l.k == 0 || l.n == 0 {
                return err(format!("layer {i}: N and K must be positive"));
            }
            if i > 0 && l.n >= self.layers[i - 1].n {
                return err(format!(
                    "layer {i}: N must strictly decrease ({} after {})",
                    l.n,
                    self.layers[i - 1].n
                ));
            }
            if i < last {
                match l.radius {
                    Some(r) if r > 0.0 && r.is_finite() => {}
                    _ => return err(format!("layer {i}: a positive radius is required")),
                }
            }
        }
        if self.layers[last].n != 1 {
            return err("the last layer must group all points (N = 1)".into());
        }
        if last > 0 && self.layers[last].k != self.layers[last - 1].n {
            return err(format!(
                "the group-all layer must take K = {} (the previous N), got {}",
                self.layers[last - 1].n,
                self.layers[last].k
            ));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if self.head_widths.contains(&0) {
            return err("head widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.sfe_lift_widths.len() > self.layers.len() || self.sfe_lift_widths.contains(&0) {
            return err("sfe_lift_widths: at most one positive width per layer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    spec: LayerSpec,
    sfe: Option<SfeStage>,
    lsa: LsaLayer,
}

/// Architecture derived from a validated config. Holds no tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    stages: Vec<Stage>,
}

/// Output of a batched forward pass.
pub struct ForwardOutput<T> {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// Per layer, present when recording is enabled.
    pub records: Vec<Option<LsaRecord<T>>>,
    /// Per layer, one grouping per cloud.
    pub groupings: Vec<Vec<RegionGrouping<T>>>,
}

/// Parameter totals, overall and per module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub modules: IndexMap<String, usize>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let flags = config.flags;
        let mut stages = Vec::with_capacity(config.layers.len());
        let mut prev_out = 0;
        let mut state_dim = 3;
        for (s, spec) in config.layers.iter().enumerate() {
            let sfe = if flags.use_sfe && s < config.sfe_lift_widths.len() {
                let lift = config.sfe_lift_widths[s];
                let next = (s + 1 < config.sfe_lift_widths.len()).then_some(lift);
                let stage = SfeStage::new(
                    format!("layer{s}.sfe"),
                    SfeStageConfig {
                        in_dim: state_dim,
                        lift_width: lift,
                        forward_width: next,
                        combine: config.options.sfe_combine,
                    },
                )?;
                state_dim = lift;
                Some(stage)
            } else {
                None
            };
            let inject = sfe.as_ref().map_or(3, |st| st.config().inject_width());
            let mut lc = LsaConfig::new(prev_out + inject, spec.f.clone());
            lc.use_lsa = flags.use_lsa;
            lc.use_region_encoder = flags.use_region_encoder;
            lc.use_modulated_pool = flags.use_modulated_pool;
            lc.options = config.options.lsa;
            let lsa = LsaLayer::new(format!("layer{s}.lsa"), lc).map_err(|e| match e {
                Error::SubLayer { index, message } => Error::Config(format!("layer {s}, sub-layer {index}: {message}")),
                other => other,
            })?;
            prev_out = lsa.out_channels();
            stages.push(Stage {
                spec: spec.clone(),
                sfe,
                lsa,
            });
        }
        Ok(Network { config, stages })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn lsa_layer(&self, index: usize) -> Option<&LsaLayer> {
        self.stages.get(index).map(|s| &s.lsa)
    }

    pub fn num_layers(&self) -> usize {
        self.stages.len()
    }

    /// Width of the backbone output fed to the head.
    pub fn feature_width(&self) -> usize {
        self.stages.last().expect("validated").lsa.out_channels()
    }

    /// Deterministic initialization: two calls with one seed agree bit for bit.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for stage in &self.stages {
            if let Some(sfe) = &stage.sfe {
                sfe.init(&mut store, &mut rng)?;
            }
            stage.lsa.init(&mut store, &mut rng)?;
        }
        let mut fan_in = self.feature_width();
        for (i, &w) in self.config.head_widths.iter().enumerate() {
            store.insert_xavier(format!("head.fc{i}"), w, fan_in, &mut rng)?;
            store.insert_batch_norm(&format!("head.bn{i}"), w)?;
            fan_in = w;
        }
        store.insert_xavier("head.out", self.config.num_classes, fan_in, &mut rng)?;
        store.insert("head.out_bias", Tensor::zeros(&[self.config.num_classes]), ParamKind::Learnable)?;
        Ok(store)
    }

    fn group<T: Scalar>(&self, stage: &Stage, coords: &[Vec<[T; 3]>], last: bool) -> Result<Vec<RegionGrouping<T>>> {
        coords
            .par_iter()
            .map(|c| {
                if last {
                    if c.len() != stage.spec.k {
                        return Err(Error::Invalid(format!(
                            "group-all layer expects {} points, got {}",
                            stage.spec.k,
                            c.len()
                        )));
                    }
                    group_all(c)
                } else {
                    let idx = farthest_point_sample(c, stage.spec.n)?;
                    let r = T::lit(stage.spec.radius.expect("validated"));
                    ball_query_indices(c, &idx, r, stage.spec.k)
                }
            })
            .collect()
    }

    /// Batched forward pass to logits. Batch norm pools statistics over every
    /// row of the batch in train mode.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, clouds: &[PointCloud<T>]) -> Result<ForwardOutput<T>> {
        if clouds.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let need = self.config.input_points();
        if let Some(c) = clouds.iter().find(|c| c.len() < need) {
            return Err(Error::Invalid(format!(
                "cloud has {} points, the first layer samples {need}",
                c.len()
            )));
        }
        let b = clouds.len();
        let mut coords: Vec<Vec<[T; 3]>> = clouds.iter().map(|c| c.coords.clone()).collect();
        let mut feats: Option<Var> = None;
        let mut state: Option<Var> = None;
        let mut records = Vec::with_capacity(self.stages.len());
        let mut all_groupings = Vec::with_capacity(self.stages.len());

        for (s, stage) in self.stages.iter().enumerate() {
            let last = s + 1 == self.stages.len();
            let groupings = self.group(stage, &coords, last)?;
            let m = groupings[0].regions();
            let k = groupings[0].k;
            let rows = b * m;

            let rel_data: Vec<T> = groupings
                .iter()
                .flat_map(|g| g.relative_coords.iter().flatten().copied())
                .collect();
            let rel = Tensor::new(vec![rows, k, 3], rel_data)?;
            let valid: Vec<usize> = groupings.iter().flat_map(|g| g.valid_counts.iter().copied()).collect();
            let flat: Vec<usize> = groupings
                .iter()
                .enumerate()
                .flat_map(|(bi, g)| {
                    let base = bi * coords[bi].len();
                    g.neighbor_indices.iter().map(move |&i| base + i)
                })
                .collect();
            let gather = |ctx: &mut Ctx<'_, T>, v: Var| -> Result<Var> {
                let width = ctx.tape.shape(v)[1];
                let g = ctx.tape.gather(v, &flat)?;
                ctx.tape.reshape(g, &[rows, k, width])
            };

            let inject = match &stage.sfe {
                Some(sfe) => {
                    let spatial_in = match state {
                        Some(st) if s > 0 => gather(ctx, st)?,
                        _ => ctx.constant(rel.clone()),
                    };
                    let out = sfe.forward(ctx, spatial_in)?;
                    state = out.next_state;
                    out.inject
                }
                None => {
                    state = None;
                    ctx.constant(rel.clone())
                }
            };
            let gathered = feats.map(|f| gather(ctx, f)).transpose()?;
            let x = inject_spatial(&mut ctx.tape, gathered, inject)?;
            let out = stage.lsa.forward(
                ctx,
                LsaInput {
                    rel: &rel,
                    valid_counts: Some(&valid),
                    features: Some(x),
                },
            )?;
            feats = Some(out.y);
            records.push(out.record);
            coords = groupings.iter().map(|g| g.centroids.clone()).collect();
            all_groupings.push(groupings);
        }

        let mut h = feats.expect("at least one layer");
        for i in 0..self.config.head_widths.len() {
            h = ctx.linear_bn_relu(h, &format!("head.fc{i}"), &format!("head.bn{i}"))?;
            h = ctx.dropout(h, self.config.dropout_rate)?;
        }
        let w = ctx.param("head.out")?;
        let bias = ctx.param("head.out_bias")?;
        let logits = ctx.tape.linear(h, w)?;
        let logits = ctx.tape.add(logits, bias)?;
        Ok(ForwardOutput {
            logits,
            records,
            groupings: all_groupings,
        })
    }

    /// Mean cross entropy of the logits against `labels`.
    pub fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
        ctx.tape.cross_entropy(logits, labels)
    }

    /// Infer-mode logits `[B, num_classes]`.
    pub fn infer_logits<T: Scalar>(&self, params: &ParamStore<T>, clouds: &[PointCloud<T>]) -> Result<Tensor<T>> {
        let mut ctx = Ctx::infer(params);
        let out = self.forward(&mut ctx, clouds)?;
        Ok(ctx.tape.value(out.logits).clone())
    }

    /// Predicted class per cloud, evaluated in batches in parallel.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, clouds: &[PointCloud<T>], batch: usize) -> Result<Vec<usize>> {
        let chunks: Vec<Vec<usize>> = clouds
            .par_chunks(batch.max(1))
            .map(|chunk| {
                let logits = self.infer_logits(params, chunk)?;
                Ok(argmax_rows(&logits))
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Accuracy at `n_points` per cloud: larger clouds are subsampled (seeded
    /// per cloud), smaller ones padded by repeating their first point.
    pub fn evaluate<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        dataset: &[PointCloud<T>],
        n_points: usize,
        seed: u64,
    ) -> Result<Metrics> {
        let need = self.config.input_points();
        let inputs: Vec<PointCloud<T>> = dataset
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = subsample(c, n_points, crate::seeds::derive(seed, "eval-subsample", 0, i as u64));
                pad_with_first(&s, need)
            })
            .collect();
        let labels = dataset
            .iter()
            .map(|c| c.label.ok_or_else(|| Error::Invalid("evaluation cloud without label".into())))
            .collect::<Result<Vec<_>>>()?;
        let preds = self.predict(params, &inputs, 32)?;
        Ok(Metrics::from_predictions(&preds, &labels, self.config.num_classes))
    }

    /// Exact count of learnable elements, overall and by module.
    pub fn count_parameters<T: Scalar>(params: &ParamStore<T>) -> ParamCount {
        let mut modules: IndexMap<String, usize> = IndexMap::new();
        let mut total = 0;
        for (name, p) in params.iter() {
            if p.kind != ParamKind::Learnable {
                continue;
            }
            let module = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["head", ..] => "head".to_string(),
                [a, b, ..] => format!("{a}.{b}"),
                _ => name.to_string(),
            };
            *modules.entry(module).or_default() += p.value.len();
            total += p.value.len();
        }
        ParamCount { total, modules }
    }
}

/// Index of the largest entry of each row, ties to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Overall accuracy, mean per-class accuracy and per-class recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub mean_class_accuracy: f64,
    /// `None` for classes absent from the labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub count: usize,
}

impl Metrics {
    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Self {
        let mut hits = vec![0usize; num_classes];
        let mut totals = vec![0usize; num_classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if l < num_classes {
                totals[l] += 1;
                if p == l {
                    hits[l] += 1;
                }
            }
        }
        let per_class: Vec<Option<f64>> = hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let correct: usize = hits.iter().sum();
        let n = labels.len();
        Metrics {
            overall_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            mean_class_accuracy: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            per_class_accuracy: per_class,
            count: n,
        }
    }
}
