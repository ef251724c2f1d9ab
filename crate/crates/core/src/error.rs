//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("objective diverged at round {round} (value {value:e})")]
    Diverged { round: usize, value: f64 },

    #[error("checkpoint config hash mismatch: file has {found:#018x}, expected {expected:#018x}")]
    CheckpointHashMismatch { found: u64, expected: u64 },

    #[error("malformed metrics or checkpoint file: {0}")]
    MalformedFile(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors that mean "the run blew up numerically" rather than
    /// "the caller misused the API".
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFinite(_))
    }
}
