//! Minimal dense-tensor autodiff: a tape [`Graph`] with the op set the
//! recommendation models need, an [`Adam`] optimizer, a central-difference
//! gradient checker and a binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckFailure, GradCheckReport};
pub use graph::{bce_logit, sigmoid, Gradients, Graph, NodeId, Segments};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;
