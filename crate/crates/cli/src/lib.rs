//! Study driver: configuration, artifact layout, the study steps and the
//! report that aggregates them.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline_cmd;
pub mod report;
pub mod study;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
