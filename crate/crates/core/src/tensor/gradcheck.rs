//! Central finite-difference checks of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Magnitude below which errors are measured against this floor instead.
    pub magnitude_floor: f64,
    /// Coordinates checked per input; larger inputs are sampled.
    pub max_coords_per_input: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            magnitude_floor: 1e-5,
            max_coords_per_input: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub index: usize,
    pub worst_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree, meaning the step crossed
    /// a kink (ReLU at zero, a max switching winners).
    pub kinks: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs.iter().map(|r| r.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)
}

fn scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    tape.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            grads
                .get(*v)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("input {i} received no gradient")))
        })
        .collect::<Result<Vec<_>>>()?;
    compare(inputs, &analytic, |values| eval(&f, values), opts)
}

/// Compares precomputed analytic gradients of `eval` at `values` with central
/// differences. Used when the function under test builds its own tape.
pub fn compare<E>(
    values: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: E,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    E: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if values.len() != analytic.len() {
        return Err(Error::Invalid("one analytic gradient per input is required".into()));
    }
    let base = eval(values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = values.to_vec();
    let mut reports = Vec::with_capacity(values.len());
    for (index, grad) in analytic.iter().enumerate() {
        if grad.shape() != values[index].shape() {
            return Err(Error::ShapeMismatch {
                op: "gradcheck",
                lhs: values[index].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let n = values[index].len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = InputReport {
            index,
            worst_rel_err: 0.0,
            checked: 0,
            kinks: 0,
        };
        for &c in &coords {
            let orig = work[index].data()[c];
            work[index].data_mut()[c] = orig + opts.h;
            let plus = eval(&work)?;
            work[index].data_mut()[c] = orig - opts.h;
            let minus = eval(&work)?;
            work[index].data_mut()[c] = orig;

            let right = (plus - base) / opts.h;
            let left = (base - minus) / opts.h;
            let scale = right.abs().max(left.abs()).max(1.0);
            if (right - left).abs() > 1e-2 * scale {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(grad.data()[c], numeric, opts.magnitude_floor);
            report.worst_rel_err = report.worst_rel_err.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
    })
}
