use indexmap::IndexMap;
use rand::Rng;

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors of a model, in insertion order. Names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { value, kind });
        Ok(())
    }

    /// Adds a `[fan_out, fan_in]` weight drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let w = Tensor::from_fn(&[fan_out, fan_in], |_| T::lit(rng.random_range(-bound..=bound)));
        self.insert(name, w, ParamKind::Learnable)
    }

    /// Adds `gamma`, `beta` (learnable) and `running_mean`, `running_var`,
    /// `tracked` (buffers) under `prefix`. `tracked` counts the batches folded
    /// into the running statistics.
    pub fn insert_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::Learnable)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Learnable)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer)?;
        self.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer)?;
        self.insert(format!("{prefix}.tracked"), Tensor::zeros(&[1]), ParamKind::Buffer)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping its kind. The shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count of all learnable tensors.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Learnable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Lazily places parameters on a tape, one leaf per name, so that repeated
/// uses of a parameter accumulate into a single gradient.
pub struct ParamBinder<'p, T> {
    store: &'p ParamStore<T>,
    bound: IndexMap<String, Var>,
}

impl<'p, T: Scalar> ParamBinder<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        ParamBinder {
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = tape.leaf(param.value.clone(), param.kind == ParamKind::Learnable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every learnable parameter that was bound, keyed by name.
    pub fn collect(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.kind(name) == Some(ParamKind::Learnable))
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
