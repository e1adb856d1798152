//! Finite-difference suites over every primitive, the layer-level
//! compositions and the toy network, repeated across seeds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::lsa::{LsaConfig, LsaInput, LsaLayer, LsaOptions, RegionMean};
use crate::network::{Flags, Network, NetworkConfig};
use crate::nn::{gradcheck_params, Ctx};
use crate::sfe::{Combine, SfeStage, SfeStageConfig};
use crate::tensor::gradcheck::{check_gradients, GradcheckOptions, GradcheckReport};
use crate::tensor::{BnConfig, BnMode, ParamKind, ParamStore, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Layer,
    Network,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "network" => Ok(Scope::Network),
            other => Err(Error::Invalid(format!("unknown gradcheck scope `{other}`"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Network => "network",
        })
    }
}

/// One checked function; `run` builds fresh random inputs from the seed.
pub struct Target {
    pub name: String,
    pub run: Box<dyn Fn(u64, GradcheckOptions) -> Result<GradcheckReport> + Send + Sync>,
}

impl Target {
    pub fn new<F>(name: impl Into<String>, run: F) -> Self
    where
        F: Fn(u64, GradcheckOptions) -> Result<GradcheckReport> + Send + Sync + 'static,
    {
        Target {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetResult {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub kinks: usize,
    pub worst: f64,
    pub worst_seed: u64,
    /// Seeds whose evaluation returned an error.
    pub errors: Vec<(u64, String)>,
}

impl TargetResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.errors.is_empty() && self.worst < tolerance && self.checked > 0
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub targets: Vec<TargetResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.targets.iter().all(|t| t.passed(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.targets.iter().map(|t| t.worst).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TargetResult> {
        self.targets.iter().filter(|t| !t.passed(self.tolerance)).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>6} {:>8} {:>6} {:>12}  status", "target", "seeds", "checked", "kinks", "worst")?;
        for t in &self.targets {
            let status = if t.passed(self.tolerance) { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} {:>6} {:>8} {:>6} {:>12.3e}  {status}",
                t.name, t.seeds, t.checked, t.kinks, t.worst
            )?;
            for (seed, e) in &t.errors {
                writeln!(f, "    seed {seed}: {e}")?;
            }
        }
        write!(f, "worst relative error {:.3e} (tolerance {:.0e})", self.worst(), self.tolerance)
    }
}

/// Runs every target for each seed.
pub fn run_targets(targets: &[Target], seeds: &[u64], opts: GradcheckOptions) -> SuiteReport {
    let results = targets
        .iter()
        .map(|t| {
            let mut r = TargetResult {
                name: t.name.clone(),
                seeds: seeds.len(),
                checked: 0,
                kinks: 0,
                worst: 0.0,
                worst_seed: seeds.first().copied().unwrap_or(0),
                errors: Vec::new(),
            };
            for &seed in seeds {
                match (t.run)(seed, GradcheckOptions { seed, ..opts }) {
                    Ok(rep) => {
                        r.checked += rep.checked();
                        r.kinks += rep.inputs.iter().map(|i| i.kinks).sum::<usize>();
                        if rep.worst() > r.worst || r.worst.is_nan() {
                            r.worst = rep.worst();
                            r.worst_seed = seed;
                        }
                        if rep.worst().is_nan() {
                            r.errors.push((seed, "NaN relative error".into()));
                        }
                    }
                    Err(e) => r.errors.push((seed, e.to_string())),
                }
            }
            r
        })
        .collect();
    SuiteReport {
        targets: results,
        tolerance: opts.tolerance,
    }
}

pub fn run_suite(scope: Scope, seeds: &[u64], opts: GradcheckOptions) -> SuiteReport {
    run_targets(&targets(scope), seeds, opts)
}

pub fn targets(scope: Scope) -> Vec<Target> {
    match scope {
        Scope::Op => op_targets(),
        Scope::Layer => layer_targets(),
        Scope::Network => network_targets(),
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y ⊙ probe)` with a random probe, so every output entry matters.
fn probe_sum(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let p = tape.constant(uniform(tape.shape(y), rng));
    let w = tape.ew_mul(y, p)?;
    tape.sum(w)
}

type OpFn = fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>;

fn op_target(name: &'static str, shapes: &'static [&'static [usize]], f: OpFn) -> Target {
    Target::new(name, move |seed, opts| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
        let probe_seed = rng.random();
        check_gradients(
            &inputs,
            |tape, v| {
                let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
                let y = f(tape, v, &mut r)?;
                probe_sum(tape, y, &mut r)
            },
            opts,
        )
    })
}

fn bn_stats(c: usize) -> RunningStats<f64> {
    RunningStats {
        mean: Tensor::zeros(&[c]),
        var: Tensor::ones(&[c]),
    }
}

fn op_targets() -> Vec<Target> {
    let mut v = vec![
        op_target("matmul", &[&[3, 4], &[4, 5]], |t, v, _| t.matmul(v[0], v[1])),
        op_target("linear", &[&[2, 3, 4], &[5, 4]], |t, v, _| t.linear(v[0], v[1])),
        op_target("add", &[&[3, 4], &[3, 4]], |t, v, _| t.add(v[0], v[1])),
        op_target("add-broadcast", &[&[2, 3, 4], &[4]], |t, v, _| t.add(v[0], v[1])),
        op_target("ew_mul", &[&[3, 4], &[3, 4]], |t, v, _| t.ew_mul(v[0], v[1])),
        op_target("ew_mul-broadcast", &[&[2, 3, 4], &[3, 4]], |t, v, _| t.ew_mul(v[0], v[1])),
        op_target("scale", &[&[3, 4]], |t, v, _| t.scale(v[0], -1.7)),
        op_target("sigmoid", &[&[3, 4]], |t, v, _| {
            let x = t.scale(v[0], 4.0)?;
            t.sigmoid(x)
        }),
        op_target("relu", &[&[4, 5]], |t, v, _| t.relu(v[0])),
        op_target("map_unary", &[&[3, 4]], |t, v, _| {
            t.map_unary(v[0], f64::tanh, |a| 1.0 - a.tanh().powi(2))
        }),
        op_target("reduce_max", &[&[3, 5, 4]], |t, v, _| Ok(t.reduce_max(v[0], 1)?.0)),
        op_target("reduce_max-last", &[&[3, 5]], |t, v, _| Ok(t.reduce_max(v[0], 1)?.0)),
        op_target("reduce_mean", &[&[3, 5, 4]], |t, v, _| t.reduce_mean(v[0], 1)),
        op_target("reduce_sum", &[&[3, 5, 4]], |t, v, _| t.reduce_sum(v[0], 0)),
        op_target("sum", &[&[3, 4]], |t, v, _| {
            let s = t.sum(v[0])?;
            t.map_unary(s, |a| a * a, |a| 2.0 * a)
        }),
        op_target("concat", &[&[2, 3, 4], &[2, 3, 2]], |t, v, _| t.concat(v[0], v[1], 2)),
        op_target("concat-rows", &[&[2, 4], &[3, 4]], |t, v, _| t.concat(v[0], v[1], 0)),
        op_target("concat_many", &[&[2, 2], &[2, 3], &[2, 1]], |t, v, _| t.concat_many(v, 1)),
        op_target("repeat_axis", &[&[3, 4]], |t, v, _| t.repeat_axis(v[0], 1, 5)),
        op_target("gather", &[&[5, 3]], |t, v, r| {
            let idx: Vec<usize> = (0..8).map(|_| r.random_range(0..5)).collect();
            t.gather(v[0], &idx)
        }),
        op_target("reshape", &[&[2, 6]], |t, v, _| t.reshape(v[0], &[3, 4])),
        op_target("batch_norm-train", &[&[6, 4], &[4], &[4]], |t, v, _| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &bn_stats(4), BnMode::Train, BnConfig::default())?;
            Ok(y)
        }),
        op_target("batch_norm-train-3d", &[&[3, 4, 5], &[5], &[5]], |t, v, _| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &bn_stats(5), BnMode::Train, BnConfig::default())?;
            Ok(y)
        }),
        op_target("batch_norm-infer", &[&[6, 4], &[4], &[4]], |t, v, _| {
            let stats = RunningStats {
                mean: Tensor::full(&[4], 0.3),
                var: Tensor::full(&[4], 2.0),
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &stats, BnMode::Infer, BnConfig::default())?;
            Ok(y)
        }),
    ];
    v.push(Target::new("cross_entropy", |seed, opts| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&[5, 4], &mut rng).map(|x| 3.0 * x);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        check_gradients(&[logits], |t, v| t.cross_entropy(v[0], &labels), opts)
    }));
    v.push(Target::new("random-composition", |seed, opts| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![uniform(&[3, 4, 6], &mut rng), uniform(&[6, 6], &mut rng), uniform(&[6], &mut rng)];
        let plan: Vec<u8> = (0..6).map(|_| rng.random_range(0..7)).collect();
        let probe_seed: u64 = rng.random();
        check_gradients(
            &inputs,
            |t, v| {
                let mut x = v[0];
                for &step in &plan {
                    x = match step {
                        0 => t.linear(x, v[1])?,
                        1 => t.add(x, v[2])?,
                        2 => t.sigmoid(x)?,
                        3 => t.relu(x)?,
                        4 => t.ew_mul(x, v[2])?,
                        5 => t.map_unary(x, f64::tanh, |a| 1.0 - a.tanh().powi(2))?,
                        _ => {
                            let m = t.reduce_max(x, 1)?.0;
                            t.repeat_axis(m, 1, 4)?
                        }
                    };
                }
                let pooled = t.reduce_mean(x, 1)?;
                let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
                probe_sum(t, pooled, &mut r)
            },
            opts,
        )
    }));
    v
}

fn learnable_names(store: &ParamStore<f64>) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Learnable)
        .map(|(n, _)| n.to_string())
        .collect()
}

fn lsa_target(name: &'static str, edit: fn(&mut LsaConfig), valid: bool) -> Target {
    Target::new(name, move |seed, opts| {
        let mut config = LsaConfig::new(4, vec![5, 6]);
        edit(&mut config);
        let layer = LsaLayer::new("lsa", config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng)?;
        let (r, k) = (3, 4);
        let rel = uniform(&[r, k, 3], &mut rng).map(|x| 0.5 * x);
        store.insert("input", uniform(&[r, k, 4], &mut rng), ParamKind::Learnable)?;
        let counts: Vec<usize> = (0..r).map(|_| rng.random_range(1..=k)).collect();
        let probe = uniform(&[r, 6], &mut rng);
        gradcheck_params(
            &store,
            &learnable_names(&store),
            |ctx| {
                let x = ctx.param("input")?;
                let out = layer.forward(
                    ctx,
                    LsaInput {
                        rel: &rel,
                        valid_counts: valid.then_some(counts.as_slice()),
                        features: Some(x),
                    },
                )?;
                let p = ctx.constant(probe.clone());
                let y = ctx.tape.ew_mul(out.y, p)?;
                ctx.tape.sum(y)
            },
            opts,
        )
    })
}

fn sfe_target(name: &'static str, combine: Combine, forward: bool) -> Target {
    Target::new(name, move |seed, opts| {
        let stage = SfeStage::new(
            "sfe",
            SfeStageConfig {
                in_dim: 3,
                lift_width: 4,
                forward_width: forward.then_some(5),
                combine,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        stage.init(&mut store, &mut rng)?;
        store.insert("input", uniform(&[3, 4, 3], &mut rng), ParamKind::Learnable)?;
        let probe_seed: u64 = rng.random();
        gradcheck_params(
            &store,
            &learnable_names(&store),
            |ctx| {
                let x = ctx.param("input")?;
                let out = stage.forward(ctx, x)?;
                let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
                let mut total = probe_sum(&mut ctx.tape, out.inject, &mut r)?;
                if let Some(s) = out.next_state {
                    let extra = probe_sum(&mut ctx.tape, s, &mut r)?;
                    total = ctx.tape.add(total, extra)?;
                }
                Ok(total)
            },
            opts,
        )
    })
}

fn layer_targets() -> Vec<Target> {
    vec![
        lsa_target("lsa", |_| {}, false),
        lsa_target("lsa-valid-counts", |_| {}, true),
        lsa_target(
            "lsa-valid-only-mean",
            |c| c.options.region_mean = RegionMean::ValidOnly,
            true,
        ),
        lsa_target(
            "lsa-inner-relu",
            |c| {
                c.options = LsaOptions {
                    sdw_inner_relu: true,
                    ..c.options
                }
            },
            false,
        ),
        lsa_target("lsa-no-region-encoder", |c| c.use_region_encoder = false, false),
        lsa_target("lsa-no-pool-modulation", |c| c.use_modulated_pool = false, false),
        lsa_target("lsa-off", |c| c.use_lsa = false, false),
        sfe_target("sfe-concat", Combine::Concat, true),
        sfe_target("sfe-concat-last", Combine::Concat, false),
        sfe_target("sfe-projected-sum", Combine::ProjectedSum, true),
    ]
}

fn toy_cloud(n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud<f64>> {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}

fn network_target(name: &'static str, flags: Flags, combine: Combine) -> Target {
    Target::new(name, move |seed, opts| {
        let mut config = NetworkConfig::toy().with_flags(flags);
        config.options.sfe_combine = combine;
        let net = Network::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: ParamStore<f64> = net.init_params(rng.random())?;
        let clouds = [toy_cloud(12, &mut rng)?, toy_cloud(12, &mut rng)?];
        let labels = [rng.random_range(0..3), rng.random_range(0..3)];
        gradcheck_params(
            &params,
            &learnable_names(&params),
            |ctx: &mut Ctx<'_, f64>| {
                let out = net.forward(ctx, &clouds)?;
                net.loss(ctx, out.logits, &labels)
            },
            opts,
        )
    })
}

fn network_targets() -> Vec<Target> {
    let mut v: Vec<Target> = Flags::ablations()
        .into_iter()
        .map(|(name, flags)| network_target(name, flags, Combine::Concat))
        .collect();
    v.push(network_target("lsa+sfe-projected-sum", Flags::default(), Combine::ProjectedSum));
    v
}
