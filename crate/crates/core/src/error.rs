//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameter, unknown config key, bad flag.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or unusable data: empty corpus, empty split, malformed manifest.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch in a kernel or model operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint file is corrupt, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: loss became non-finite at batch {batch}")]
    Diverged { batch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
