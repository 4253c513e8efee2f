//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, model construction, data handling and training.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input data (e.g. non-binary targets).
    #[error("input error: {0}")]
    Input(String),

    /// Internal state corruption; callers should abort the run.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Malformed file contents (checkpoints, tensor blobs, config files).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training aborted on a non-finite loss; carries a diagnostic dump.
    #[error("training aborted at step {step}: {diagnostic}")]
    TrainAbort { step: usize, diagnostic: String },
}

pub type Result<T> = std::result::Result<T, Error>;
