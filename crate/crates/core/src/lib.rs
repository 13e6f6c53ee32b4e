//! Multimodal item representations for CTR prediction: contrastive
//! pretraining of an item encoder, similarity-tier and knowledge-extractor
//! features, the CTR variants that consume them, and the synthetic data and
//! metrics used to evaluate everything.

pub mod batch;
pub mod ctr;
pub mod error;
pub mod make;
pub mod metrics;
pub mod nn;
pub mod reps;
pub mod retrieval;
pub mod scl;
pub mod simtier;
pub mod synth;

pub use error::{CoreError, Result};
pub use reps::Embeddings;
