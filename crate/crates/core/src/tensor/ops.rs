//! Differentiable primitives. Each method computes its forward value and, on a
//! recording tape, the bookkeeping its gradient rule needs.

use super::dense::split_axis;
use super::scalar::{gemm, MatRef};
use super::tape::{BatchNormSaved, Op};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and produce updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Running mean and variance, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// Logistic function clamped to the open unit interval of `T`.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

impl<T: Scalar> Tape<T> {
    /// `a[..., m, k] x b[k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (k, n) = (bshape[0], bshape[1]);
        let rows = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(
            MatRef::new(self.value(a).data(), rows, k),
            MatRef::new(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        let mut shape = ashape;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: ai, b: bi }, &[ai, bi]))
    }

    /// Pointwise linear map `x[..., in] -> x W^T [..., out]` for `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (xshape, wshape) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xshape.is_empty() || wshape.len() != 2 || xshape[xshape.len() - 1] != wshape[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xshape,
                rhs: wshape,
            });
        }
        let (out_dim, in_dim) = (wshape[0], wshape[1]);
        let rows = if in_dim == 0 {
            xshape[..xshape.len() - 1].iter().product()
        } else {
            self.value(x).len() / in_dim
        };
        let mut out = vec![T::zero(); rows * out_dim];
        gemm(
            MatRef::new(self.value(x).data(), rows, in_dim),
            MatRef::new(self.value(w).data(), out_dim, in_dim).t(),
            T::zero(),
            &mut out,
        );
        let mut shape = xshape;
        *shape.last_mut().unwrap() = out_dim;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x: xi, w: wi }, &[xi, wi]))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.broadcast_binary("add", ai, bi, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    /// Elementwise product; `b` may match a trailing suffix of `a`'s shape.
    pub fn ew_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.broadcast_binary("ew_mul", ai, bi, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        ai: usize,
        bi: usize,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let inner = bv.len();
        let mut out = Vec::with_capacity(av.len());
        if inner > 0 {
            for chunk in av.data().chunks_exact(inner) {
                out.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok(Tensor::from_parts(av.shape().to_vec(), out))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x: xi, factor }, &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.value(x).map(stable_sigmoid);
        Ok(self.push(out, Op::Sigmoid { x: xi }, &[xi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu { x: xi }, &[xi]))
    }

    /// Custom elementwise map with a caller-supplied derivative.
    pub fn map_unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        derivative: impl Fn(T) -> T,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.value(x);
        let out = xv.map(&f);
        let d = if self.is_recording() {
            xv.data().iter().map(|&v| derivative(v)).collect()
        } else {
            Vec::new()
        };
        Ok(self.push(out, Op::Map { x: xi, derivative: d }, &[xi]))
    }

    /// Maximum along `axis`, ties resolved to the lowest index. Returns the
    /// reduced value and the winning index for every output element.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let xi = self.check(x)?;
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        if extent == 0 {
            return Err(Error::EmptyAxis { op: "reduce_max" });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let block = &data[o * extent * inner..(o + 1) * extent * inner];
            let mut best: Vec<T> = block[..inner].to_vec();
            let mut arg = vec![0usize; inner];
            for j in 1..extent {
                let row = &block[j * inner..(j + 1) * inner];
                for i in 0..inner {
                    if row[i] > best[i] {
                        best[i] = row[i];
                        arg[i] = j;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        let var = self.push(
            value,
            Op::ReduceMax {
                x: xi,
                axis,
                argmax: argmax.clone(),
            },
            &[xi],
        );
        Ok((var, argmax))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_additive(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_additive(x, axis, false)
    }

    fn reduce_additive(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        if extent == 0 {
            return Err(Error::EmptyAxis {
                op: if mean { "reduce_mean" } else { "reduce_sum" },
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let denom = T::lit(extent as f64);
        for o in 0..outer {
            let block = &data[o * extent * inner..(o + 1) * extent * inner];
            let mut acc: Vec<T> = block[..inner].to_vec();
            // ascending slot order
            for j in 1..extent {
                for (a, &v) in acc.iter_mut().zip(&block[j * inner..(j + 1) * inner]) {
                    *a = *a + v;
                }
            }
            if mean {
                out.extend(acc.into_iter().map(|v| v / denom));
            } else {
                out.extend(acc);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean {
            Op::ReduceMean { x: xi, axis }
        } else {
            Op::ReduceSum { x: xi, axis }
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, &[xi]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let total = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        Ok(self.push(Tensor::scalar(total), Op::SumAll { x: xi }, &[xi]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.concat_many(&[a, b], axis)
    }

    /// Joins tensors whose shapes agree everywhere except `axis`.
    pub fn concat_many(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let indices = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let extent = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: indices.clone(),
                axis,
            },
            &indices,
        ))
    }

    /// Inserts a new axis at `axis` holding `times` copies of the input.
    pub fn repeat_axis(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len() + 1,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, times);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Repeat { x: xi, axis, times },
            &[xi],
        ))
    }

    /// Selects rows (entries of axis 0) by index; repeated indices are allowed.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::InvalidShape {
                shape,
                reason: "gather needs rank >= 1".into(),
            });
        }
        let n = shape[0];
        let row = self.value(x).len().checked_div(n).unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!("gather index {bad} out of range {n}")));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&data[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                x: xi,
                indices: indices.to_vec(),
            },
            &[xi],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(out, Op::Reshape { x: xi }, &[xi]))
    }

    /// Batch normalization over every axis but the last (the channel axis).
    ///
    /// In [`BnMode::Train`] the batch statistics are used and the updated
    /// running statistics are returned; the caller decides when to commit them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BnMode,
        config: BnConfig,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.shape(x).to_vec();
        let channels = *shape.last().ok_or_else(|| Error::InvalidShape {
            shape: shape.clone(),
            reason: "batch_norm needs a channel axis".into(),
        })?;
        for (what, s) in [
            ("gamma", self.shape(gamma)),
            ("beta", self.shape(beta)),
            ("running mean", running.mean.shape()),
            ("running var", running.var.shape()),
        ] {
            if s != [channels] {
                return Err(Error::Invalid(format!(
                    "batch_norm {what} has shape {s:?}, expected [{channels}]"
                )));
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len().checked_div(channels).unwrap_or(0);
        let eps = config.eps;

        let (mean, var, update) = match mode {
            BnMode::Train => {
                if rows == 0 {
                    return Err(Error::EmptyAxis { op: "batch_norm" });
                }
                let mut mean = vec![0.0f64; channels];
                for row in xv.chunks_exact(channels) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0f64; channels];
                for row in xv.chunks_exact(channels) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let unbias = if rows > 1 {
                    rows as f64 / (rows as f64 - 1.0)
                } else {
                    1.0
                };
                let mom = config.momentum;
                let update = RunningStats {
                    mean: Tensor::from_parts(
                        vec![channels],
                        running
                            .mean
                            .data()
                            .iter()
                            .zip(&mean)
                            .map(|(&r, &m)| T::lit(mom * r.f64() + (1.0 - mom) * m))
                            .collect(),
                    ),
                    var: Tensor::from_parts(
                        vec![channels],
                        running
                            .var
                            .data()
                            .iter()
                            .zip(&var)
                            .map(|(&r, &v)| T::lit(mom * r.f64() + (1.0 - mom) * v * unbias))
                            .collect(),
                    ),
                };
                (mean, var, Some(update))
            }
            BnMode::Infer => (
                running.mean.data().iter().map(|v| v.f64()).collect(),
                running.var.data().iter().map(|v| v.f64()).collect(),
                None,
            ),
        };

        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(channels.max(1)) {
            for c in 0..channels {
                let h = (row[c] - mean_t[c]) * inv_std[c];
                xhat.push(h);
                out.push(gv[c] * h + bv[c]);
            }
        }
        let saved = BatchNormSaved {
            x: xi,
            gamma: gi,
            beta: bi,
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        };
        let var_out = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm(Box::new(saved)),
            &[xi, gi, bi],
        );
        Ok((var_out, update))
    }

    /// Mean negative log-softmax of `logits[B, C]` at the given labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(data.len());
        let mut total = 0.0f64;
        for (row, &label) in data.chunks_exact(classes).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let log_z = z.ln() + max;
            total += (log_z - row[label]).f64();
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let loss = Tensor::scalar(T::lit(total / labels.len() as f64));
        let keep_probs = if self.is_recording() { probs } else { Vec::new() };
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits: li,
                probs: keep_probs,
                labels: labels.to_vec(),
            },
            &[li],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ew_mul_broadcasts_trailing() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[0.5, 1.0]));
        let y = tape.ew_mul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0]);

        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.ew_mul(m, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 2.0, 1.5, 4.0]);

        let bad = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(tape.ew_mul(m, bad).is_err());
    }

    #[test]
    fn ew_mul_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let b = tape.leaf(t(&[3], &[4.0, 0.25, -3.0]), true);
        let y = tape.ew_mul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 0.25, -3.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, 2.0, -1000.0, 1000.0]));
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!(v[2] > 0.0 && v[2] <= 1e-300);
        assert!(v[3] < 1.0 && v[3].is_finite());
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-1.0, 3.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn reduce_max_rows_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 4.0, 3.0, 2.0]), true);
        let (y, arg) = tape.reduce_max(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        assert_eq!(arg, vec![1, 0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[7.0, 7.0, 7.0]));
        let (_, arg) = tape.reduce_max(x, 0).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn reduce_max_rejects_empty_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(tape.reduce_max(x, 0), Err(Error::EmptyAxis { .. })));
        assert!(matches!(tape.reduce_max(x, 2), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn reduce_mean_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let m = tape.reduce_mean(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        for &v in g.get(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[5], 2.5));
        let m = tape.reduce_mean(c, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);
    }

    #[test]
    fn concat_layout_and_split_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[2.0]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[2, 3, 64], |i| i as f64), true);
        let q = tape.leaf(Tensor::from_fn(&[2, 3, 64], |i| -(i as f64)), true);
        let s = tape.concat(p, q, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 3, 128]);
        let w = tape.constant(Tensor::from_fn(&[2, 3, 128], |i| i as f64 * 0.5));
        let prod = tape.ew_mul(s, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let gp = g.get(p).unwrap();
        let gq = g.get(q).unwrap();
        for r in 0..6 {
            for c in 0..64 {
                assert_eq!(gp.data()[r * 64 + c], (r * 128 + c) as f64 * 0.5);
                assert_eq!(gq.data()[r * 64 + c], (r * 128 + 64 + c) as f64 * 0.5);
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[10, 3], |i| ((i * 7) % 11) as f64 * 0.3 - 1.0));
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let running = RunningStats {
            mean: Tensor::zeros(&[3]),
            var: Tensor::ones(&[3]),
        };
        let (y, update) = tape
            .batch_norm(x, gamma, beta, &running, BnMode::Train, BnConfig::default())
            .unwrap();
        assert!(update.is_some());
        let v = tape.value(y).data();
        for c in 0..3 {
            let col: Vec<f64> = (0..10).map(|r| v[r * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_input_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 2], 3.0));
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let running = RunningStats {
            mean: Tensor::zeros(&[2]),
            var: Tensor::ones(&[2]),
        };
        let (y, _) = tape
            .batch_norm(x, gamma, beta, &running, BnMode::Train, BnConfig::default())
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_infer_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let running = RunningStats {
            mean: Tensor::zeros(&[2]),
            var: Tensor::ones(&[2]),
        };
        let cfg = BnConfig { eps: 0.0, ..Default::default() };
        let (y, update) = tape
            .batch_norm(x, gamma, beta, &running, BnMode::Infer, cfg)
            .unwrap();
        assert!(update.is_none());
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 5]));
        let loss = tape.cross_entropy(logits, &[0, 2, 4]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(logits, &[0, 2, 5]).is_err());
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 3], &[800.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!(v.is_finite() && v < 1e-300);
    }

    #[test]
    fn backward_rules() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn repeated_use_accumulates_by_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.add(x, x).unwrap();
        let z = tape.ew_mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        // d/dx sum(2x * x) = 4x
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.constant(Tensor::zeros(&[1]));
        assert!(matches!(b.relu(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(!tape.requires_grad(x));
        let y = tape.sigmoid(x).unwrap();
        assert!(!tape.requires_grad(y));
    }
}
