//! The local spatial aware (LSA) layer.
//!
//! Relative coordinates of each region are encoded into a per-point spatial
//! feature and a region-level feature shared by every slot. A chain of
//! sigmoid generators turns that into spatial distribution weights (SDWs),
//! one level per MLP sub-layer, that gate the features entering each shared
//! MLP step and the final max pool.
//!
//! Layout: regions of all clouds in a batch are stacked, so every tensor is
//! `[R, K, C]` with `R = batch × M`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

/// Width of the per-point and regional spatial features.
pub const SPATIAL_WIDTH: usize = 64;

/// How the regional feature averages over slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMean {
    /// Mean over all K slots, padding duplicates included.
    #[default]
    AllSlots,
    /// Mean over the unpadded neighbors only.
    ValidOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LsaOptions {
    /// Apply a ReLU between each generator weight and its sigmoid.
    pub sdw_inner_relu: bool,
    pub region_mean: RegionMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaConfig {
    pub in_channels: usize,
    /// Output widths of the shared-MLP sub-layers.
    pub widths: Vec<usize>,
    /// Off: plain shared MLP and max pool.
    pub use_lsa: bool,
    /// Off: the spatial feature is the per-point part only.
    pub use_region_encoder: bool,
    /// Off: the final pool is an unweighted max.
    pub use_modulated_pool: bool,
    pub options: LsaOptions,
}

impl LsaConfig {
    pub fn new(in_channels: usize, widths: Vec<usize>) -> Self {
        LsaConfig {
            in_channels,
            widths,
            use_lsa: true,
            use_region_encoder: true,
            use_modulated_pool: true,
            options: LsaOptions::default(),
        }
    }

    /// Number of SDW levels the layer consumes.
    pub fn sdw_levels(&self) -> usize {
        match (self.use_lsa, self.use_modulated_pool) {
            (false, _) => 0,
            (true, true) => self.widths.len(),
            (true, false) => self.widths.len() - 1,
        }
    }

    pub fn spatial_width(&self) -> usize {
        if self.use_region_encoder {
            2 * SPATIAL_WIDTH
        } else {
            SPATIAL_WIDTH
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// The spatial feature of a layer, in input slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDistributionFeature<T> {
    /// `[R, K, 64]`.
    pub per_point: Tensor<T>,
    /// `[R, 64]`, absent without the region encoder.
    pub regional: Option<Tensor<T>>,
    /// `[R, K, 64 or 128]`: per-point followed by the broadcast regional part.
    pub combined: Tensor<T>,
}

/// Copies taken when [`crate::nn::SdwHooks::record`] is set, in input slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaRecord<T> {
    pub spatial: Option<SpatialDistributionFeature<T>>,
    /// One `[R, K, F_l]` tensor per SDW level.
    pub sdw: Vec<Tensor<T>>,
}

pub struct LsaInput<'a, T> {
    /// `[R, K, 3]` relative coordinates.
    pub rel: &'a Tensor<T>,
    /// Unpadded neighbors per region; required by [`RegionMean::ValidOnly`].
    pub valid_counts: Option<&'a [usize]>,
    /// `[R, K, C_in]` features; the relative coordinates when absent.
    pub features: Option<Var>,
}

pub struct LsaOutput<T> {
    /// `[R, F_L]`.
    pub y: Var,
    pub record: Option<LsaRecord<T>>,
}

/// `S^p = W0 · P` per slot. `rel: [R, K, 3]`, `w0: [64, 3]`.
pub fn point_spatial_feature<T: Scalar>(tape: &mut Tape<T>, rel: Var, w0: Var) -> Result<Var> {
    tape.linear(rel, w0)
}

/// `S^g = mean_K(W1 · P)`, shared weights across slots. Returns `[R, 64]`.
pub fn region_spatial_feature<T: Scalar>(tape: &mut Tape<T>, rel: Var, w1: Var) -> Result<Var> {
    if tape.shape(rel).len() != 3 {
        return Err(Error::InvalidShape {
            shape: tape.shape(rel).to_vec(),
            reason: "relative coordinates must be [R, K, 3]".into(),
        });
    }
    let h = tape.linear(rel, w1)?;
    tape.reduce_mean(h, 1)
}

/// `[S^p, S^g]` with `S^g` repeated over the K slots.
pub fn spatial_distribution_feature<T: Scalar>(tape: &mut Tape<T>, per_point: Var, regional: Var) -> Result<Var> {
    let (ps, rs) = (tape.shape(per_point).to_vec(), tape.shape(regional).to_vec());
    if ps.len() != 3 || rs.len() != 2 || ps[0] != rs[0] {
        return Err(Error::ShapeMismatch {
            op: "spatial_distribution_feature",
            lhs: ps,
            rhs: rs,
        });
    }
    let broadcast = tape.repeat_axis(regional, 1, ps[1])?;
    tape.concat(per_point, broadcast, 2)
}

fn gate<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, inner_relu: bool) -> Result<Var> {
    let mut h = tape.linear(x, w)?;
    if inner_relu {
        h = tape.relu(h)?;
    }
    tape.sigmoid(h)
}

/// `e¹ = σ(Ws¹ · S)`.
pub fn sdw_first<T: Scalar>(tape: &mut Tape<T>, s: Var, ws1: Var, inner_relu: bool) -> Result<Var> {
    gate(tape, s, ws1, inner_relu)
}

/// `e^{l+1} = σ(Ws^{l+1} · e^l)`.
pub fn sdw_next<T: Scalar>(tape: &mut Tape<T>, e: Var, ws: Var, inner_relu: bool) -> Result<Var> {
    gate(tape, e, ws, inner_relu)
}

/// `act(bn(Wm · (X ⊗ e)))`. Without `e` this is a plain shared-MLP step;
/// `bn` names a batch-norm parameter prefix.
pub fn sdw_modulated_mlp_step<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    e: Option<Var>,
    wm: Var,
    bn: Option<&str>,
    relu: bool,
) -> Result<Var> {
    let input = match e {
        Some(e) => {
            if ctx.tape.shape(x) != ctx.tape.shape(e) {
                return Err(Error::ShapeMismatch {
                    op: "sdw_modulated_mlp_step",
                    lhs: ctx.tape.shape(x).to_vec(),
                    rhs: ctx.tape.shape(e).to_vec(),
                });
            }
            ctx.tape.ew_mul(x, e)?
        }
        None => x,
    };
    let mut h = ctx.tape.linear(input, wm)?;
    if let Some(prefix) = bn {
        h = ctx.batch_norm(h, prefix)?;
    }
    if relu {
        h = ctx.tape.relu(h)?;
    }
    Ok(h)
}

/// `Y = max_K(X ⊗ e)`, or a plain max without `e`. `[R, K, F] -> [R, F]`.
pub fn sdw_modulated_max_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, e: Option<Var>) -> Result<Var> {
    let pooled_in = match e {
        Some(e) => {
            if tape.shape(x) != tape.shape(e) {
                return Err(Error::ShapeMismatch {
                    op: "sdw_modulated_max_pool",
                    lhs: tape.shape(x).to_vec(),
                    rhs: tape.shape(e).to_vec(),
                });
            }
            tape.ew_mul(x, e)?
        }
        None => x,
    };
    Ok(tape.reduce_max(pooled_in, 1)?.0)
}

/// Row permutation that sorts each region's slots by (relative coordinates,
/// feature row). Reductions over the sorted layout do not depend on the order
/// in which neighbors arrived.
pub fn canonical_order<T: Scalar>(rel: &Tensor<T>, features: Option<&Tensor<T>>) -> Vec<usize> {
    let (r, k) = (rel.shape()[0], rel.shape()[1]);
    let width = features.map_or(0, |f| f.shape()[2]);
    let cmp = |a: usize, b: usize| -> Ordering {
        let rd = rel.data();
        for d in 0..3 {
            let o = rd[a * 3 + d].f64().total_cmp(&rd[b * 3 + d].f64());
            if o != Ordering::Equal {
                return o;
            }
        }
        if let Some(f) = features {
            let fd = f.data();
            for c in 0..width {
                let o = fd[a * width + c].f64().total_cmp(&fd[b * width + c].f64());
                if o != Ordering::Equal {
                    return o;
                }
            }
        }
        Ordering::Equal
    };
    let mut perm: Vec<usize> = (0..r * k).collect();
    for region in perm.chunks_mut(k.max(1)) {
        region.sort_by(|&a, &b| cmp(a, b));
    }
    perm
}

fn permute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let row = t.len() / perm.len().max(1);
    let mut data = Vec::with_capacity(t.len());
    for &p in perm {
        data.extend_from_slice(&t.data()[p * row..(p + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same extents")
}

fn unpermute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let row = t.len() / perm.len().max(1);
    let mut data = vec![T::zero(); t.len()];
    for (i, &p) in perm.iter().enumerate() {
        data[p * row..(p + 1) * row].copy_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same extents")
}

/// One LSA layer: parameter naming, initialization and the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaLayer {
    prefix: String,
    config: LsaConfig,
}

impl LsaLayer {
    pub fn new(prefix: impl Into<String>, config: LsaConfig) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::Config("an LSA layer needs at least one MLP width".into()));
        }
        if let Some(i) = config.widths.iter().position(|&w| w == 0) {
            return Err(Error::SubLayer {
                index: i,
                message: "zero MLP width".into(),
            });
        }
        if config.in_channels == 0 {
            return Err(Error::Config("an LSA layer needs at least one input channel".into()));
        }
        Ok(LsaLayer {
            prefix: prefix.into(),
            config,
        })
    }

    pub fn config(&self) -> &LsaConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Weights as (name, [out, in], sub-layer index), in initialization order.
    pub fn weight_specs(&self) -> Vec<(String, [usize; 2], usize)> {
        let c = &self.config;
        let mut specs = Vec::new();
        let levels = c.sdw_levels();
        if levels > 0 {
            specs.push((self.name("w0"), [SPATIAL_WIDTH, 3], 0));
            if c.use_region_encoder {
                specs.push((self.name("w1"), [SPATIAL_WIDTH, 3], 0));
            }
            specs.push((self.name("ws1"), [c.widths[0], c.spatial_width()], 0));
            for l in 2..=levels {
                specs.push((self.name(&format!("ws{l}")), [c.widths[l - 1], c.widths[l - 2]], l - 1));
            }
        }
        let mut fan_in = c.in_channels;
        for (l, &w) in c.widths.iter().enumerate() {
            specs.push((self.name(&format!("wm{l}")), [w, fan_in], l));
            fan_in = w;
        }
        specs
    }

    /// Batch-norm prefixes with their channel counts.
    pub fn bn_specs(&self) -> Vec<(String, usize)> {
        self.config
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| (self.name(&format!("bn{l}")), w))
            .collect()
    }

    /// Xavier-uniform weights, unit batch-norm scale, zero shift.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for (name, [o, i], _) in self.weight_specs() {
            store.insert_xavier(name, o, i, rng)?;
        }
        for (prefix, c) in self.bn_specs() {
            store.insert_batch_norm(&prefix, c)?;
        }
        Ok(())
    }

    /// Verifies stored extents against the configuration, naming the first
    /// offending sub-layer.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        for (name, shape, index) in self.weight_specs() {
            let got = store
                .get(&name)
                .map_err(|_| Error::SubLayer {
                    index,
                    message: format!("missing parameter `{name}`"),
                })?
                .shape();
            if got != shape {
                return Err(Error::SubLayer {
                    index,
                    message: format!("`{name}` has shape {got:?}, expected {shape:?}"),
                });
            }
        }
        for (index, (prefix, c)) in self.bn_specs().into_iter().enumerate() {
            for part in ["gamma", "beta", "running_mean", "running_var"] {
                let name = format!("{prefix}.{part}");
                let ok = store.get(&name).map(|t| t.shape() == [c]).unwrap_or(false);
                if !ok || (part.starts_with("running") != (store.kind(&name) == Some(ParamKind::Buffer))) {
                    return Err(Error::SubLayer {
                        index,
                        message: format!("`{name}` missing or not of shape [{c}]"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, input: LsaInput<'_, T>) -> Result<LsaOutput<T>> {
        let c = &self.config;
        let rel = input.rel;
        if rel.rank() != 3 || rel.shape()[2] != 3 {
            return Err(Error::InvalidShape {
                shape: rel.shape().to_vec(),
                reason: "relative coordinates must be [R, K, 3]".into(),
            });
        }
        let (r, k) = (rel.shape()[0], rel.shape()[1]);
        let x_in = match input.features {
            Some(v) => v,
            None => ctx.constant(rel.clone()),
        };
        if ctx.tape.shape(x_in) != [r, k, c.in_channels] {
            return Err(Error::ShapeMismatch {
                op: "lsa_layer_forward",
                lhs: ctx.tape.shape(x_in).to_vec(),
                rhs: vec![r, k, c.in_channels],
            });
        }
        self.check_params(ctx.binder.store())?;

        let perm = canonical_order(rel, Some(ctx.tape.value(x_in)));
        let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
        let rel_c = if identity { rel.clone() } else { permute_rows(rel, &perm) };
        let x0 = if identity {
            x_in
        } else {
            let flat = ctx.tape.reshape(x_in, &[r * k, c.in_channels])?;
            let g = ctx.tape.gather(flat, &perm)?;
            ctx.tape.reshape(g, &[r, k, c.in_channels])?
        };

        let record = ctx.hooks.record;
        let levels = c.sdw_levels();
        let mut sdw = Vec::with_capacity(levels);
        let mut spatial = None;
        if levels > 0 {
            if let Some(value) = ctx.hooks.freeze {
                for l in 0..levels {
                    sdw.push(ctx.constant(Tensor::full(&[r, k, c.widths[l]], T::lit(value))));
                }
            } else {
                let rel_v = ctx.constant(rel_c.clone());
                let w0 = ctx.param(&self.name("w0"))?;
                let per_point = point_spatial_feature(&mut ctx.tape, rel_v, w0)?;
                let (s, regional) = if c.use_region_encoder {
                    let mean_in = match c.options.region_mean {
                        RegionMean::AllSlots => rel_v,
                        RegionMean::ValidOnly => {
                            let counts = input.valid_counts.ok_or_else(|| {
                                Error::Config("valid-only region mean needs valid counts".into())
                            })?;
                            let weighted = valid_weighted(rel, counts)?;
                            ctx.constant(permute_rows(&weighted, &perm))
                        }
                    };
                    let w1 = ctx.param(&self.name("w1"))?;
                    let regional = region_spatial_feature(&mut ctx.tape, mean_in, w1)?;
                    (
                        spatial_distribution_feature(&mut ctx.tape, per_point, regional)?,
                        Some(regional),
                    )
                } else {
                    (per_point, None)
                };
                if record {
                    spatial = Some(SpatialDistributionFeature {
                        per_point: unpermute_rows(ctx.tape.value(per_point), &perm),
                        regional: regional.map(|g| ctx.tape.value(g).clone()),
                        combined: unpermute_rows(ctx.tape.value(s), &perm),
                    });
                }
                let inner = c.options.sdw_inner_relu;
                let ws1 = ctx.param(&self.name("ws1"))?;
                let mut e = sdw_first(&mut ctx.tape, s, ws1, inner)?;
                sdw.push(e);
                for l in 2..=levels {
                    let ws = ctx.param(&self.name(&format!("ws{l}")))?;
                    e = sdw_next(&mut ctx.tape, e, ws, inner)?;
                    sdw.push(e);
                }
            }
        }

        let mut h = x0;
        for l in 0..c.widths.len() {
            let e = if l == 0 { None } else { sdw.get(l - 1).copied() };
            let wm = ctx.param(&self.name(&format!("wm{l}")))?;
            let bn = self.name(&format!("bn{l}"));
            h = sdw_modulated_mlp_step(ctx, h, e, wm, Some(&bn), true)?;
        }
        let pool_e = if c.use_lsa && c.use_modulated_pool {
            Some(sdw[c.widths.len() - 1])
        } else {
            None
        };
        let y = sdw_modulated_max_pool(&mut ctx.tape, h, pool_e)?;

        let record = record.then(|| LsaRecord {
            spatial,
            sdw: sdw
                .iter()
                .map(|&e| unpermute_rows(ctx.tape.value(e), &perm))
                .collect(),
        });
        Ok(LsaOutput { y, record })
    }
}

/// Relative coordinates scaled so that a mean over all K slots equals the
/// mean over the first `valid` slots of each region.
fn valid_weighted<T: Scalar>(rel: &Tensor<T>, counts: &[usize]) -> Result<Tensor<T>> {
    let (r, k) = (rel.shape()[0], rel.shape()[1]);
    if counts.len() != r || counts.iter().any(|&v| v == 0 || v > k) {
        return Err(Error::Invalid(format!("valid counts {counts:?} do not fit {r} regions of {k} slots")));
    }
    let mut data = rel.data().to_vec();
    for (region, &v) in counts.iter().enumerate() {
        let w = T::lit(k as f64 / v as f64);
        for slot in 0..k {
            let scale = if slot < v { w } else { T::zero() };
            for d in 0..3 {
                let i = (region * k + slot) * 3 + d;
                data[i] = data[i] * scale;
            }
        }
    }
    Tensor::new(rel.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck_params, SdwHooks};
    use crate::tensor::gradcheck::GradcheckOptions;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn layer(in_ch: usize, widths: &[usize]) -> (LsaLayer, ParamStore<f64>) {
        let l = LsaLayer::new("lsa", LsaConfig::new(in_ch, widths.to_vec())).unwrap();
        let mut store = ParamStore::new();
        l.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (l, store)
    }

    #[test]
    fn point_feature_examples() {
        let mut tape = Tape::new();
        let rel = tape.constant(t(&[1, 2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let s = point_spatial_feature(&mut tape, rel, w).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 6.0]);
        let w64 = tape.constant(Tensor::ones(&[64, 3]));
        let s = point_spatial_feature(&mut tape, rel, w64).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 64]);
        let bad = tape.constant(Tensor::ones(&[64, 4]));
        assert!(point_spatial_feature(&mut tape, rel, bad).is_err());
    }

    #[test]
    fn region_feature_examples() {
        let mut tape = Tape::new();
        let sym = tape.constant(t(&[1, 2, 3], &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]));
        let w = tape.constant(random(&[64, 3], &mut ChaCha8Rng::seed_from_u64(1)));
        let g = region_spatial_feature(&mut tape, sym, w).unwrap();
        assert_eq!(tape.shape(g), &[1, 64]);
        assert!(tape.value(g).data().iter().all(|v| v.abs() < 1e-15));

        let pts = tape.constant(t(&[1, 2, 3], &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]));
        let w1 = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let g = region_spatial_feature(&mut tape, pts, w1).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0]);
    }

    #[test]
    fn combined_feature_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let pp = tape.constant(random(&[2, 3, 64], &mut rng));
        let rg = tape.constant(random(&[2, 64], &mut rng));
        let s = spatial_distribution_feature(&mut tape, pp, rg).unwrap();
        assert_eq!(tape.shape(s), &[2, 3, 128]);
        let (sv, pv, gv) = (tape.value(s).data(), tape.value(pp).data(), tape.value(rg).data());
        for r in 0..2 {
            for k in 0..3 {
                let row = &sv[(r * 3 + k) * 128..(r * 3 + k + 1) * 128];
                assert_eq!(&row[..64], &pv[(r * 3 + k) * 64..(r * 3 + k + 1) * 64]);
                assert_eq!(&row[64..], &gv[r * 64..(r + 1) * 64]);
            }
        }
    }

    #[test]
    fn generator_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let e = sdw_first(&mut tape, s, zero, false).unwrap();
        assert_eq!(tape.value(e).data(), &[0.5, 0.5]);

        let ws = tape.constant(t(&[1, 3], &[2.0, 0.0, 0.0]));
        let e1 = sdw_first(&mut tape, s, ws, false).unwrap();
        assert!((tape.value(e1).data()[0] - 0.880797077977882).abs() < 1e-12);

        let one = tape.constant(t(&[1, 1, 1], &[1.0]));
        let two = tape.constant(t(&[1, 1], &[2.0]));
        let a = sdw_next(&mut tape, one, two, false).unwrap();
        let b = sdw_next(&mut tape, a, two, false).unwrap();
        assert!((tape.value(b).data()[0] - 0.8534092045709026).abs() < 1e-12);
    }

    #[test]
    fn mlp_step_toy_and_identity_modulation() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::train(&store);
        let x = ctx.constant(t(&[1, 1, 1], &[2.0]));
        let e = ctx.constant(t(&[1, 1, 1], &[0.5]));
        let wm = ctx.constant(t(&[1, 1], &[3.0]));
        let y = sdw_modulated_mlp_step(&mut ctx, x, Some(e), wm, None, false).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ctx.constant(random(&[2, 3, 5], &mut rng));
        let ones = ctx.constant(Tensor::ones(&[2, 3, 5]));
        let wm = ctx.constant(random(&[4, 5], &mut rng));
        let a = sdw_modulated_mlp_step(&mut ctx, x, Some(ones), wm, None, true).unwrap();
        let b = sdw_modulated_mlp_step(&mut ctx, x, None, wm, None, true).unwrap();
        assert_eq!(ctx.tape.value(a), ctx.tape.value(b));
        let bad = ctx.constant(Tensor::ones(&[2, 3, 4]));
        assert!(sdw_modulated_mlp_step(&mut ctx, x, Some(bad), wm, None, true).is_err());
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let ones = tape.constant(Tensor::ones(&[1, 2, 2]));
        let y = sdw_modulated_max_pool(&mut tape, x, Some(ones)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        let e = tape.constant(t(&[1, 2, 2], &[1.0, 0.5, 0.5, 1.0]));
        let y = sdw_modulated_max_pool(&mut tape, x, Some(e)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.0]);
    }

    #[test]
    fn toy_parameter_count() {
        let (_, store) = layer(3, &[4]);
        assert_eq!(store.learnable_count(), 916);
    }

    #[test]
    fn flag_variants_drop_unused_weights() {
        let mut cfg = LsaConfig::new(3, vec![4, 8]);
        cfg.use_region_encoder = false;
        let l = LsaLayer::new("a", cfg.clone()).unwrap();
        let names: Vec<_> = l.weight_specs().into_iter().map(|s| (s.0, s.1)).collect();
        assert!(names.contains(&("a.ws1".into(), [4, 64])));
        assert!(!names.iter().any(|(n, _)| n == "a.w1"));
        cfg.use_modulated_pool = false;
        let l = LsaLayer::new("a", cfg.clone()).unwrap();
        assert!(!l.weight_specs().iter().any(|s| s.0 == "a.ws2"));
        cfg.use_lsa = false;
        let l = LsaLayer::new("a", cfg).unwrap();
        assert_eq!(l.weight_specs().len(), 2);
    }

    fn run(
        l: &LsaLayer,
        store: &ParamStore<f64>,
        rel: &Tensor<f64>,
        x: Option<&Tensor<f64>>,
        hooks: SdwHooks,
    ) -> (Tensor<f64>, Option<LsaRecord<f64>>) {
        let mut ctx = Ctx::train(store);
        ctx.hooks = hooks;
        let features = x.map(|x| ctx.constant(x.clone()));
        let out = l
            .forward(
                &mut ctx,
                LsaInput {
                    rel,
                    valid_counts: None,
                    features,
                },
            )
            .unwrap();
        (ctx.tape.value(out.y).clone(), out.record)
    }

    #[test]
    fn zero_generators_equal_half_modulation() {
        let (l, mut store) = layer(5, &[6, 6, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rel = random(&[3, 4, 3], &mut rng);
        let x = random(&[3, 4, 5], &mut rng);
        for name in ["lsa.ws1", "lsa.ws2", "lsa.ws3"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let (a, _) = run(&l, &store, &rel, Some(&x), SdwHooks::default());
        let frozen = SdwHooks {
            freeze: Some(0.5),
            record: false,
        };
        let (b, _) = run(&l, &store, &rel, Some(&x), frozen);
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_unit_weights_equal_plain_path() {
        let (l, store) = layer(5, &[6, 8]);
        let mut cfg = l.config().clone();
        cfg.use_lsa = false;
        let plain = LsaLayer::new("lsa", cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rel = random(&[3, 4, 3], &mut rng);
        let x = random(&[3, 4, 5], &mut rng);
        let frozen = SdwHooks {
            freeze: Some(1.0),
            record: false,
        };
        let (a, _) = run(&l, &store, &rel, Some(&x), frozen);
        let (b, _) = run(&plain, &store, &rel, Some(&x), SdwHooks::default());
        assert_eq!(a, b);
    }

    #[test]
    fn output_extent_and_default_input() {
        let (l, store) = layer(3, &[64, 64, 128]);
        let rel = random(&[2, 8, 3], &mut ChaCha8Rng::seed_from_u64(7));
        let (y, _) = run(&l, &store, &rel, None, SdwHooks::default());
        assert_eq!(y.shape(), &[2, 128]);
    }

    #[test]
    fn bad_params_name_the_sub_layer() {
        let (l, mut store) = layer(3, &[4, 6]);
        let mut bad = ParamStore::new();
        for (name, p) in store.iter() {
            let v = if name == "lsa.wm1" { Tensor::zeros(&[6, 5]) } else { p.value.clone() };
            bad.insert(name, v, p.kind).unwrap();
        }
        assert!(matches!(l.check_params(&bad), Err(Error::SubLayer { index: 1, .. })));
        store.set("lsa.bn0.gamma", Tensor::ones(&[4])).unwrap();
        assert!(l.check_params(&store).is_ok());
    }

    #[test]
    fn regional_half_is_shared_and_sdw_in_open_interval() {
        let (l, store) = layer(3, &[4, 8]);
        let rel = random(&[5, 6, 3], &mut ChaCha8Rng::seed_from_u64(8));
        let hooks = SdwHooks {
            freeze: None,
            record: true,
        };
        let (_, rec) = run(&l, &store, &rel, None, hooks);
        let rec = rec.unwrap();
        let s = rec.spatial.unwrap();
        let comb = s.combined.data();
        for r in 0..5 {
            let first = &comb[(r * 6) * 128 + 64..(r * 6) * 128 + 128];
            for k in 1..6 {
                assert_eq!(&comb[(r * 6 + k) * 128 + 64..(r * 6 + k) * 128 + 128], first);
            }
        }
        assert_eq!(rec.sdw.len(), 2);
        assert_eq!(rec.sdw[0].shape(), &[5, 6, 4]);
        assert!(rec.sdw.iter().flat_map(|e| e.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn valid_only_mean_ignores_padding() {
        let mut cfg = LsaConfig::new(3, vec![4]);
        cfg.options.region_mean = RegionMean::ValidOnly;
        let l = LsaLayer::new("lsa", cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        l.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // two real neighbors then two padding copies of the first
        let rel = t(&[1, 4, 3], &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut ctx = Ctx::train(&store);
        ctx.hooks.record = true;
        let out = l
            .forward(
                &mut ctx,
                LsaInput {
                    rel: &rel,
                    valid_counts: Some(&[2]),
                    features: None,
                },
            )
            .unwrap();
        let g = out.record.unwrap().spatial.unwrap().regional.unwrap();
        let w1 = store.get("lsa.w1").unwrap();
        for c in 0..64 {
            let expect = w1.data()[c * 3] * 2.0;
            assert!((g.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (l, mut store) = layer(4, &[5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rel = random(&[3, 4, 3], &mut rng);
        store.insert("input", random(&[3, 4, 4], &mut rng), ParamKind::Learnable).unwrap();
        let probe = random(&[3, 6], &mut rng);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Learnable)
            .map(|(n, _)| n.to_string())
            .collect();
        let report = gradcheck_params(
            &store,
            &names,
            |ctx| {
                let x = ctx.param("input")?;
                let out = l.forward(
                    ctx,
                    LsaInput {
                        rel: &rel,
                        valid_counts: None,
                        features: Some(x),
                    },
                )?;
                let p = ctx.constant(probe.clone());
                let weighted = ctx.tape.ew_mul(out.y, p)?;
                ctx.tape.sum(weighted)
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    fn diag_oracle(x: &Tensor<f64>, e: &Tensor<f64>, wm: &Tensor<f64>) -> Vec<f64> {
        let (fo, fi) = (wm.shape()[0], wm.shape()[1]);
        let rows = x.len() / fi;
        let mut out = Vec::with_capacity(rows * fo);
        for r in 0..rows {
            // W'_m = Wm · diag(e_r), then W'_m · x_r
            let mut updated = vec![0.0; fo * fi];
            for o in 0..fo {
                for i in 0..fi {
                    updated[o * fi + i] = wm.data()[o * fi + i] * e.data()[r * fi + i];
                }
            }
            for o in 0..fo {
                let mut acc = 0.0;
                for i in 0..fi {
                    acc += updated[o * fi + i] * x.data()[r * fi + i];
                }
                out.push(acc);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn modulated_step_matches_updated_weight_oracle(seed in any::<u64>(), fi in 1usize..9, fo in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, 5, fi], &mut rng);
            let e = Tensor::from_fn(&[3, 5, fi], |_| rng.random_range(0.0..1.0));
            let wm = random(&[fo, fi], &mut rng);
            let expect = diag_oracle(&x, &e, &wm);
            let store = ParamStore::<f64>::new();
            let mut ctx = Ctx::train(&store);
            let (xv, ev, wv) = (ctx.constant(x), ctx.constant(e), ctx.constant(wm));
            let y = sdw_modulated_mlp_step(&mut ctx, xv, Some(ev), wv, None, false).unwrap();
            for (a, b) in ctx.tape.value(y).data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn slot_permutations_leave_output_bit_identical(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, store) = layer(4, &[5, 6]);
            let (r, k) = (4, 6);
            let rel = random(&[r, k, 3], &mut rng);
            let x = random(&[r, k, 4], &mut rng);
            let mut perm: Vec<usize> = Vec::new();
            for region in 0..r {
                let mut slots: Vec<usize> = (0..k).collect();
                slots.shuffle(&mut rng);
                perm.extend(slots.into_iter().map(|s| region * k + s));
            }
            let hooks = SdwHooks { freeze: None, record: true };
            let (a, ra) = run(&l, &store, &rel, Some(&x), hooks);
            let (b, rb) = run(&l, &store, &permute_rows(&rel, &perm), Some(&permute_rows(&x, &perm)), hooks);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
            let (ra, rb) = (ra.unwrap(), rb.unwrap());
            for (ea, eb) in ra.sdw.iter().zip(&rb.sdw) {
                prop_assert_eq!(bits(&permute_rows(ea, &perm)), bits(eb));
            }
        }
    }
}
