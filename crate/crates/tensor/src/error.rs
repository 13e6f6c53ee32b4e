use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("l2_normalize: row {row} has norm {norm:e} below 1e-12")]
    DegenerateNorm { row: usize, norm: f64 },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward: loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
