use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters and the step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub decay_ratio: f64,
    pub decay_interval_epochs: usize,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 0.002,
            decay_ratio: 0.7,
            decay_interval_epochs: 40,
            lr_floor: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `base_lr * decay_ratio^floor(epoch / interval)`, never below `lr_floor`.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let k = epoch / self.decay_interval_epochs.max(1);
        (self.base_lr * self.decay_ratio.powi(k as i32)).max(self.lr_floor)
    }
}

/// Adam optimizer state: one pair of moment accumulators per learnable parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    /// Restores saved state (used when resuming from a checkpoint).
    pub fn restore(&mut self, step: u64, moments: IndexMap<String, (Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one bias-corrected Adam update at the learning rate scheduled
    /// for `epoch`. A non-finite gradient rejects the whole step and leaves
    /// both parameters and optimizer state untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        epoch: usize,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if params.kind(name) != Some(ParamKind::Learnable) {
                return Err(Error::Invalid(format!("`{name}` is not learnable")));
            }
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }

        self.step += 1;
        let c = self.config;
        let lr = c.effective_lr(epoch);
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bias1);
        let inv_sqrt_bias2 = T::lit(1.0 / bias2.sqrt());
        let eps = T::lit(c.epsilon);

        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params.get_mut(name)?;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_sqrt_bias2 + eps;
                *pv = *pv - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
