//! Dense tensors, a recording tape for reverse-mode differentiation, the
//! differentiable primitives, and the Adam optimizer.

pub mod checkpoint;
mod dense;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use ops::{stable_sigmoid, BnConfig, BnMode, RunningStats};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamBinder, ParamKind, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
