use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("feature dim mismatch: encoder expects {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("pipeline is closed")]
    Closed,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("encoder: {0}")]
    Encoder(String),
    #[error(transparent)]
    Core(#[from] mmrec_core::CoreError),
    #[error(transparent)]
    Tensor(#[from] mmrec_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
