//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by environments, providers, models, and the trainer.
#[derive(Debug, Error)]
pub enum SdError {
    /// Invalid configuration value; the message names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shape mismatch between producer and consumer.
    #[error("shape error: {0}")]
    Shape(String),

    /// API misuse (stepping a finished episode, sampling an empty buffer, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data out of contract (e.g. pixel values outside [0,1]).
    #[error("input error: {0}")]
    Input(String),

    /// A loss or gradient became non-finite; the message names the component.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Missing or malformed fields while assembling a report.
    #[error("report error: {0}")]
    Report(String),

    /// Checkpoint/container version or integrity failure.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SdError>;

impl SdError {
    /// Process exit code convention: 1 for usage/config errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SdError::Config(_) | SdError::Usage(_) => 1,
            _ => 2,
        }
    }
}
