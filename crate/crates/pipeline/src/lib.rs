//! New-item events go through a bounded queue to encoder workers, whose
//! output lands in a versioned [`IndexTable`] that readers poll concurrently.
//!
//! [`Pipeline`] is the threaded engine used by the TCP [`service`];
//! [`sim::simulate`] replays an event log on virtual time.

mod clock;
mod encoder;
mod error;
mod freshness;
mod pipeline;
pub mod service;
pub mod sim;
mod table;

pub use clock::{Clock, VirtualClock, WallClock};
pub use encoder::{Encoder, FnEncoder, SclEncoder};
pub use error::{PipelineError, Result};
pub use freshness::{freshness_report, FreshnessReport, Window};
pub use pipeline::{Commit, DeadLetter, ItemEvent, Pipeline, PipelineConfig};
pub use table::{IndexTable, VersionedRep};
