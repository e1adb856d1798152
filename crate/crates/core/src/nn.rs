//! Forward-pass context shared by the model components: the tape, parameter
//! bindings, batch-norm mode and the running-statistics updates a training
//! pass produces.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{self, GradcheckOptions, GradcheckReport};
use crate::tensor::{BnConfig, BnMode, Gradients, ParamBinder, ParamStore, RunningStats, Scalar, Tape, Tensor, Var};

/// Testing and inspection hooks for LSA layers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdwHooks {
    /// Replace every spatial distribution weight with this constant.
    pub freeze: Option<f64>,
    /// Keep copies of the spatial features and weights in the layer output.
    pub record: bool,
}

/// New running statistics and batch count for one batch-norm prefix.
pub type BnUpdate<T> = (RunningStats<T>, Option<T>);

/// Parameter gradients keyed by store name.
pub type NamedGrads<T> = IndexMap<String, Tensor<T>>;

pub struct Ctx<'p, T: Scalar> {
    pub tape: Tape<T>,
    pub binder: ParamBinder<'p, T>,
    pub mode: BnMode,
    pub bn_config: BnConfig,
    pub hooks: SdwHooks,
    /// Drives dropout masks; dropout is skipped when absent.
    pub dropout_rng: Option<ChaCha8Rng>,
    bn_updates: IndexMap<String, BnUpdate<T>>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// A recording context for training or gradient checks.
    pub fn train(store: &'p ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new(), BnMode::Train)
    }

    /// A non-recording context that normalizes with running statistics.
    pub fn infer(store: &'p ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::inference(), BnMode::Infer)
    }

    pub fn with_tape(store: &'p ParamStore<T>, tape: Tape<T>, mode: BnMode) -> Self {
        Ctx {
            tape,
            binder: ParamBinder::new(store),
            mode,
            bn_config: BnConfig::default(),
            hooks: SdwHooks::default(),
            dropout_rng: None,
            bn_updates: IndexMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.var(&mut self.tape, name)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    /// Batch norm with parameters `{prefix}.gamma|beta|running_mean|running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let store = self.binder.store();
        let running = RunningStats {
            mean: store.get(&format!("{prefix}.running_mean"))?.clone(),
            var: store.get(&format!("{prefix}.running_var"))?.clone(),
        };
        // Until 1/(t+1) drops below 1 - momentum the running statistics are the
        // plain average of the t+1 batches seen, so they do not start out
        // biased toward the initial values.
        let tracked = store
            .get(&format!("{prefix}.tracked"))
            .ok()
            .and_then(|t| t.item())
            .map(|t| t.f64());
        let mut config = self.bn_config;
        if let Some(t) = tracked {
            config.momentum = config.momentum.min(t / (t + 1.0));
        }
        let (y, update) = self.tape.batch_norm(x, gamma, beta, &running, self.mode, config)?;
        if let Some(u) = update {
            self.bn_updates.insert(prefix.to_string(), (u, tracked.map(|t| T::lit(t + 1.0))));
        }
        Ok(y)
    }

    /// `relu(bn(x · wᵀ))`, the shared-MLP step.
    pub fn linear_bn_relu(&mut self, x: Var, weight: &str, bn: &str) -> Result<Var> {
        let w = self.param(weight)?;
        let h = self.tape.linear(x, w)?;
        let h = self.batch_norm(h, bn)?;
        self.tape.relu(h)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// rest by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.tape.shape(x), |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.tape.constant(mask);
        self.tape.ew_mul(x, m)
    }

    pub fn bn_updates(&self) -> &IndexMap<String, BnUpdate<T>> {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> IndexMap<String, BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Backpropagates `loss` and returns the gradients of every learnable
    /// parameter that took part in the pass.
    pub fn param_grads(&mut self, loss: Var) -> Result<(Gradients<T>, NamedGrads<T>)> {
        let mut grads = self.tape.backward(loss)?;
        let named = self.binder.collect(&mut grads);
        Ok((grads, named))
    }
}

/// Writes running-statistics updates back into the store.
pub fn commit_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: IndexMap<String, BnUpdate<T>>,
) -> Result<()> {
    for (prefix, (stats, tracked)) in updates {
        store.set(&format!("{prefix}.running_mean"), stats.mean)?;
        store.set(&format!("{prefix}.running_var"), stats.var)?;
        if let Some(t) = tracked {
            store.set(&format!("{prefix}.tracked"), Tensor::scalar(t).reshape(&[1])?)?;
        }
    }
    Ok(())
}

/// Finite-difference check of the scalar `f` with respect to the named store
/// entries. Each evaluation runs in train mode on a fresh context.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    names: &[String],
    f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut ctx = Ctx::train(store);
    let out = f(&mut ctx)?;
    let (_, grads) = ctx.param_grads(out)?;
    let values = names
        .iter()
        .map(|n| store.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .zip(&values)
        .map(|(n, v)| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    gradcheck::compare(
        &values,
        &analytic,
        |vals| {
            let mut perturbed = store.clone();
            for (n, v) in names.iter().zip(vals) {
                perturbed.set(n, v.clone())?;
            }
            let mut ctx = Ctx::with_tape(&perturbed, Tape::inference(), BnMode::Train);
            let out = f(&mut ctx)?;
            ctx.tape
                .value(out)
                .item()
                .ok_or_else(|| Error::NonScalarLoss(ctx.tape.shape(out).to_vec()))
        },
        opts,
    )
}
