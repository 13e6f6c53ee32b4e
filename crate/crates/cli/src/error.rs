use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("no runs found in {0}")]
    NoRuns(String),
    #[error("runs come from different configs: {0:?} (pass --allow-mixed to combine them)")]
    MixedHashes(Vec<String>),
    #[error(transparent)]
    Core(#[from] mmrec_core::CoreError),
    #[error(transparent)]
    Pipeline(#[from] mmrec_pipeline::PipelineError),
    #[error(transparent)]
    Tensor(#[from] mmrec_tensor::TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::NoRuns(_) => "no_runs",
            CliError::MixedHashes(_) => "mixed_hashes",
            CliError::Core(_) => "core",
            CliError::Pipeline(_) => "pipeline",
            CliError::Tensor(_) => "tensor",
            CliError::Io(_) => "io",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}
