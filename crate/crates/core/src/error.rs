//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates a documented constraint.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Caller-provided data is malformed or out of range.
    #[error("invalid input: {0}")]
    Input(String),

    /// A text or binary artifact could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Stored data is inconsistent with its own metadata.
    #[error("data integrity: {0}")]
    Integrity(String),

    /// An API was called in an unsupported order or mode.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A bug: an internal invariant did not hold.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code convention: 1 for user/config errors, 2 for internal bugs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
