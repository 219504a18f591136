pub mod config;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod multiview;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod swinlite;

pub use error::{CheckpointError, Error, Result};
