use std::io;

use mmrec_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("not defined: {0}")]
    NotDefined(String),
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no representation for item {0}")]
    MissingRep(i64),
    #[error("requested top {n} from a corpus of {len}")]
    TopN { n: usize, len: usize },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("unmatched checkpoint ids: {0:?}")]
    Unmatched(Vec<String>),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
