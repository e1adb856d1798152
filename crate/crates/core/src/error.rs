use thiserror::Error;

/// Errors raised anywhere in the kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{op}: reduction axis has zero extent")]
    EmptyAxis { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite gradient for `{0}`; optimizer step rejected")]
    NonFiniteGradient(String),

    #[error("cannot sample {requested} points from a cloud of {available}")]
    TooManySamples { requested: usize, available: usize },

    #[error("degenerate region {region}: no point within radius {radius} of centroid {centroid:?}")]
    DegenerateRegion {
        region: usize,
        radius: f64,
        centroid: [f64; 3],
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sub-layer {index}: {message}")]
    SubLayer { index: usize, message: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("OFF parse error: {0}")]
    Off(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
