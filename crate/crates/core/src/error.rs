//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container or manifest contents.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed but unsupported encoding (codec, bit depth, version).
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Caller violated a documented precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Invalid parameter combination (band edges, zero depth, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Signal shorter than one analysis frame.
    #[error("signal too short: {0}")]
    TooShort(String),

    /// Teacher made no progress between the sampled start and target epochs,
    /// so the trajectory-matching denominator is degenerate.
    #[error("stagnant teacher: {0}")]
    StagnantTeacher(String),

    /// Trajectory buffer contents are inconsistent with each other.
    #[error("buffer integrity: {0}")]
    BufferIntegrity(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
