//! Point-cloud classification built around local spatial aware (LSA) layers.

mod error;
pub mod geometry;
pub mod lsa;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod seeds;
pub mod sfe;
pub mod tensor;

pub use error::{Error, Result};
