//! Spatial feature extractor branch.
//!
//! Each stage lifts its spatial input (relative coordinates for the first
//! stage, the previous stage's state gathered through the current grouping
//! afterwards) with a shared MLP and combines the result with the input. The
//! combination is injected into the backbone layer; a second MLP followed by
//! a max over the region produces the state handed to the next stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `[lift(s), s]`.
    #[default]
    Concat,
    /// `lift(s) + P·s`, keeping the lift width.
    ProjectedSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfeStageConfig {
    pub in_dim: usize,
    pub lift_width: usize,
    /// Width of the state passed on; `None` for the last stage.
    pub forward_width: Option<usize>,
    pub combine: Combine,
}

impl SfeStageConfig {
    pub fn inject_width(&self) -> usize {
        match self.combine {
            Combine::Concat => self.lift_width + self.in_dim,
            Combine::ProjectedSum => self.lift_width,
        }
    }
}

pub struct SfeOutput {
    /// `[R, K, D]`.
    pub inject: Var,
    /// `[R, forward_width]`, one row per centroid.
    pub next_state: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfeStage {
    prefix: String,
    config: SfeStageConfig,
}

impl SfeStage {
    pub fn new(prefix: impl Into<String>, config: SfeStageConfig) -> Result<Self> {
        if config.in_dim == 0 || config.lift_width == 0 || config.forward_width == Some(0) {
            return Err(Error::Config(format!("SFE stage extents must be positive: {config:?}")));
        }
        Ok(SfeStage {
            prefix: prefix.into(),
            config,
        })
    }

    pub fn config(&self) -> &SfeStageConfig {
        &self.config
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.config;
        store.insert_xavier(self.name("lift"), c.lift_width, c.in_dim, rng)?;
        store.insert_batch_norm(&self.name("lift_bn"), c.lift_width)?;
        if c.combine == Combine::ProjectedSum {
            store.insert_xavier(self.name("proj"), c.lift_width, c.in_dim, rng)?;
        }
        if let Some(f) = c.forward_width {
            store.insert_xavier(self.name("fwd"), f, c.inject_width(), rng)?;
            store.insert_batch_norm(&self.name("fwd_bn"), f)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, spatial_in: Var) -> Result<SfeOutput> {
        let c = &self.config;
        let shape = ctx.tape.shape(spatial_in).to_vec();
        if shape.len() != 3 || shape[2] != c.in_dim {
            return Err(Error::ShapeMismatch {
                op: "sfe_forward",
                lhs: shape,
                rhs: vec![0, 0, c.in_dim],
            });
        }
        let lifted = ctx.linear_bn_relu(spatial_in, &self.name("lift"), &self.name("lift_bn"))?;
        let inject = match c.combine {
            Combine::Concat => ctx.tape.concat(lifted, spatial_in, 2)?,
            Combine::ProjectedSum => {
                let p = ctx.param(&self.name("proj"))?;
                let projected = ctx.tape.linear(spatial_in, p)?;
                ctx.tape.add(lifted, projected)?
            }
        };
        let next_state = match c.forward_width {
            Some(_) => {
                let h = ctx.linear_bn_relu(inject, &self.name("fwd"), &self.name("fwd_bn"))?;
                Some(ctx.tape.reduce_max(h, 1)?.0)
            }
            None => None,
        };
        Ok(SfeOutput { inject, next_state })
    }
}

/// Channel concatenation `[X, inject]`; `inject` alone when there are no features.
pub fn inject_spatial<T: Scalar>(tape: &mut Tape<T>, x: Option<Var>, inject: Var) -> Result<Var> {
    match x {
        None => Ok(inject),
        Some(x) => {
            let (xs, is) = (tape.shape(x), tape.shape(inject));
            if xs.len() != 3 || is.len() != 3 || xs[..2] != is[..2] {
                return Err(Error::ShapeMismatch {
                    op: "inject_spatial",
                    lhs: xs.to_vec(),
                    rhs: is.to_vec(),
                });
            }
            if is[2] == 0 {
                return Ok(x);
            }
            tape.concat(x, inject, 2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck_params;
    use crate::tensor::gradcheck::GradcheckOptions;
    use crate::tensor::{ParamKind, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn stage(combine: Combine, forward: Option<usize>) -> (SfeStage, ParamStore<f64>) {
        let s = SfeStage::new(
            "sfe",
            SfeStageConfig {
                in_dim: 3,
                lift_width: 32,
                forward_width: forward,
                combine,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        s.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (s, store)
    }

    #[test]
    fn first_stage_extent_and_zero_lift() {
        let (s, mut store) = stage(Combine::Concat, Some(32));
        assert_eq!(s.config().inject_width(), 35);
        store.set("sfe.lift", Tensor::zeros(&[32, 3])).unwrap();
        let rel = random(&[2, 4, 3], &mut ChaCha8Rng::seed_from_u64(2));
        let mut ctx = Ctx::train(&store);
        let x = ctx.constant(rel.clone());
        let out = s.forward(&mut ctx, x).unwrap();
        let inj = ctx.tape.value(out.inject);
        assert_eq!(inj.shape(), &[2, 4, 35]);
        for row in 0..8 {
            let r = &inj.data()[row * 35..(row + 1) * 35];
            assert!(r[..32].iter().all(|&v| v == 0.0));
            assert_eq!(&r[32..], &rel.data()[row * 3..(row + 1) * 3]);
        }
        assert_eq!(ctx.tape.shape(out.next_state.unwrap()), &[2, 32]);
    }

    #[test]
    fn projected_sum_keeps_lift_width() {
        let (s, store) = stage(Combine::ProjectedSum, None);
        let mut ctx = Ctx::train(&store);
        let x = ctx.constant(random(&[2, 4, 3], &mut ChaCha8Rng::seed_from_u64(3)));
        let out = s.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(out.inject), &[2, 4, 32]);
        assert!(out.next_state.is_none());
    }

    #[test]
    fn inject_spatial_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 5]));
        let inj = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let y = inject_spatial(&mut tape, Some(x), inj).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 9]);
        assert_eq!(inject_spatial(&mut tape, None, inj).unwrap(), inj);
        let empty = tape.constant(Tensor::zeros(&[2, 3, 0]));
        assert_eq!(inject_spatial(&mut tape, Some(x), empty).unwrap(), x);
        let bad = tape.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(inject_spatial(&mut tape, Some(x), bad).is_err());
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        for combine in [Combine::Concat, Combine::ProjectedSum] {
            let s = SfeStage::new(
                "sfe",
                SfeStageConfig {
                    in_dim: 3,
                    lift_width: 4,
                    forward_width: Some(5),
                    combine,
                },
            )
            .unwrap();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            s.init(&mut store, &mut rng).unwrap();
            store.insert("input", random(&[3, 4, 3], &mut rng), ParamKind::Learnable).unwrap();
            let probe_inject = random(&[3, 4, s.config().inject_width()], &mut rng);
            let probe_state = random(&[3, 5], &mut rng);
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
                    let out = s.forward(ctx, x)?;
                    let (pi, ps) = (ctx.constant(probe_inject.clone()), ctx.constant(probe_state.clone()));
                    let a = ctx.tape.ew_mul(out.inject, pi)?;
                    let a = ctx.tape.sum(a)?;
                    let b = ctx.tape.ew_mul(out.next_state.unwrap(), ps)?;
                    let b = ctx.tape.sum(b)?;
                    ctx.tape.add(a, b)
                },
                GradcheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{combine:?}: worst {}", report.worst());
        }
    }
}
