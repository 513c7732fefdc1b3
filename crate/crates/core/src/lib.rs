//! Memory-constrained progressive federated training, simulated on one
//! machine.
//!
//! A dense classifier is split into blocks. A shrinking pass trains blocks
//! back to front over frozen random prefixes, keeps each trained block as the
//! initialization for later and distills it into one linear layer. A growing
//! pass then trains blocks front to back over frozen trained prefixes, with
//! the distilled layers standing in for the blocks not trained yet. Devices
//! only train what their memory budget allows; a block freezes once its
//! effective parameter movement stops changing.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod federation;
pub mod freeze;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
