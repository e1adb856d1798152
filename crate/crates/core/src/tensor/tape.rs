use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::split_axis;
use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Recorded primitive applications. Indices refer to earlier nodes on the same tape.
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Sigmoid { x: usize },
    Relu { x: usize },
    ReduceMax { x: usize, axis: usize, argmax: Vec<usize> },
    ReduceMean { x: usize, axis: usize },
    ReduceSum { x: usize, axis: usize },
    SumAll { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Repeat { x: usize, axis: usize, times: usize },
    Gather { x: usize, indices: Vec<usize> },
    Reshape { x: usize },
    BatchNorm(Box<BatchNormSaved<T>>),
    CrossEntropy { logits: usize, probs: Vec<T>, labels: Vec<usize> },
    Map { x: usize, derivative: Vec<T> },
}

pub(crate) struct BatchNormSaved<T> {
    pub x: usize,
    pub gamma: usize,
    pub beta: usize,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records primitive applications for one forward pass and replays them in
/// reverse to compute gradients.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape built with [`Tape::inference`] keeps values only; nothing on it
/// requires a gradient.
pub struct Tape<T: Scalar> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Gradients are only tracked on recording tapes.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Every gradient-tracked leaf
    /// receives a gradient (zeros when the loss does not depend on it).
    /// Contributions from multiple uses of a value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_index = self.check(loss)?;
        let loss_shape = self.nodes[loss_index].value.shape().to_vec();
        if self.nodes[loss_index].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = HashMap::new();
        if self.nodes[loss_index].requires_grad {
            grads[loss_index] = Some(Tensor::full(&loss_shape, T::one()));
        }
        for index in (0..=loss_index).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            if matches!(self.nodes[index].op, Op::Leaf) {
                out.insert(index, g);
                continue;
            }
            self.propagate(index, &g, &mut grads);
        }
        for (index, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(index)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], index: usize, g: Tensor<T>) {
        if !self.nodes[index].requires_grad {
            return;
        }
        match &mut grads[index] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, index: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[index];
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let rows = av.len() / k;
                if needs(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    gemm(
                        MatRef::new(g.data(), rows, n),
                        MatRef::new(bv.data(), k, n).t(),
                        T::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    gemm(
                        MatRef::new(av.data(), rows, k).t(),
                        MatRef::new(g.data(), rows, n),
                        T::zero(),
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / in_dim;
                if needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    gemm(
                        MatRef::new(g.data(), rows, out_dim),
                        MatRef::new(wv.data(), out_dim, in_dim),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    gemm(
                        MatRef::new(g.data(), rows, out_dim).t(),
                        MatRef::new(xv.data(), rows, in_dim),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    let bv = val(*b);
                    let mut db = vec![T::zero(); bv.len()];
                    for chunk in g.data().chunks_exact(bv.len()) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let inner = bv.len();
                if needs(*a) {
                    let mut da = Vec::with_capacity(av.len());
                    for chunk in g.data().chunks_exact(inner) {
                        da.extend(chunk.iter().zip(bv.data()).map(|(&gv, &bb)| gv * bb));
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); inner];
                    for (gc, ac) in g.data().chunks_exact(inner).zip(av.data().chunks_exact(inner)) {
                        for ((d, &gv), &aa) in db.iter_mut().zip(gc).zip(ac) {
                            *d = *d + gv * aa;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &xx)| if xx > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ReduceMax { x, axis, argmax } => {
                let xv = val(*x);
                let (outer, extent, inner) = split_axis(xv.shape(), *axis);
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        dx[(o * extent + argmax[slot]) * inner + i] = g.data()[slot];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ReduceMean { x, axis } | Op::ReduceSum { x, axis } => {
                let xv = val(*x);
                let (outer, extent, inner) = split_axis(xv.shape(), *axis);
                let scale = match node.op {
                    Op::ReduceMean { .. } => T::one() / T::lit(extent as f64),
                    _ => T::one(),
                };
                let mut dx = Vec::with_capacity(xv.len());
                for o in 0..outer {
                    let row = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..extent {
                        dx.extend(row.iter().map(|&v| v * scale));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SumAll { x } => {
                let xv = val(*x);
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &input in inputs {
                    let iv = val(input);
                    let extent = iv.shape()[*axis];
                    if needs(input) {
                        let mut d = Vec::with_capacity(iv.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + extent * inner]);
                        }
                        self.accumulate(grads, input, Tensor::from_parts(iv.shape().to_vec(), d));
                    }
                    offset += extent;
                }
            }
            Op::Repeat { x, axis, times } => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[*axis..].iter().product();
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for t in 0..*times {
                        let start = (o * times + t) * inner;
                        for (d, &v) in dst.iter_mut().zip(&g.data()[start..start + inner]) {
                            *d = *d + v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Gather { x, indices } => {
                let xv = val(*x);
                let row = xv.len() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut dx[src * row..(src + 1) * row];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[r * row..(r + 1) * row]) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Reshape { x } => {
                let xv = val(*x);
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(xv.shape().to_vec(), g.data().to_vec()),
                );
            }
            Op::BatchNorm(saved) => self.batch_norm_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let lv = val(*logits);
                let classes = lv.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &label) in labels.iter().enumerate() {
                    let slot = &mut d[b * classes + label];
                    *slot = *slot - scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Map { x, derivative } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(derivative)
                    .map(|(&gv, &dv)| gv * dv)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
        }
    }

    fn batch_norm_backward(
        &self,
        saved: &BatchNormSaved<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.nodes[saved.x].value;
        let gamma = self.nodes[saved.gamma].value.data();
        let channels = gamma.len();
        let rows = xv.len() / channels;

        let mut dgamma = vec![0.0f64; channels];
        let mut dbeta = vec![0.0f64; channels];
        for (gr, xr) in g
            .data()
            .chunks_exact(channels)
            .zip(saved.xhat.chunks_exact(channels))
        {
            for c in 0..channels {
                dgamma[c] += (gr[c] * xr[c]).f64();
                dbeta[c] += gr[c].f64();
            }
        }

        if self.nodes[saved.x].requires_grad {
            let mut dx = Vec::with_capacity(xv.len());
            if saved.train {
                let n = T::lit(rows as f64);
                let inv_n = T::one() / n;
                let coef: Vec<T> = (0..channels)
                    .map(|c| gamma[c] * saved.inv_std[c] * inv_n)
                    .collect();
                let sum_g: Vec<T> = dbeta.iter().map(|&v| T::lit(v)).collect();
                let sum_gx: Vec<T> = dgamma.iter().map(|&v| T::lit(v)).collect();
                for (gr, xr) in g
                    .data()
                    .chunks_exact(channels)
                    .zip(saved.xhat.chunks_exact(channels))
                {
                    for c in 0..channels {
                        dx.push(coef[c] * (n * gr[c] - sum_g[c] - xr[c] * sum_gx[c]));
                    }
                }
            } else {
                let coef: Vec<T> = (0..channels).map(|c| gamma[c] * saved.inv_std[c]).collect();
                for gr in g.data().chunks_exact(channels) {
                    dx.extend(gr.iter().zip(&coef).map(|(&a, &b)| a * b));
                }
            }
            self.accumulate(grads, saved.x, Tensor::from_parts(xv.shape().to_vec(), dx));
        }
        let to_t = |v: Vec<f64>| Tensor::from_parts(vec![channels], v.into_iter().map(T::lit).collect());
        self.accumulate(grads, saved.gamma, to_t(dgamma));
        self.accumulate(grads, saved.beta, to_t(dbeta));
    }
}

/// Gradients of tracked leaves, produced once per tape by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
