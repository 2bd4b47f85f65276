//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message carries both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN/Inf produced or consumed where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid configuration (geometry, head counts, anchor factors, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A broken internal invariant (e.g. partition coverage).
    #[error("internal consistency error: {0}")]
    Internal(String),
    /// Malformed file contents (bad magic, version, dtype, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Training aborted on a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
