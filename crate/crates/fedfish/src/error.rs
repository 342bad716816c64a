//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Values outside the mathematical domain of an operation
    /// (non-finite inputs, empty batches, out-of-range labels).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract that cannot be expressed in types.
    #[error("contract error: {0}")]
    Contract(String),

    /// Model does not have the structure an operation requires.
    #[error("architecture error: {0}")]
    Architecture(String),

    /// Federation protocol violation (bad cohort, mismatched round state).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The disaggregation system is numerically too ill-conditioned to use.
    #[error("conditioning error: reciprocal condition {rcond:.3e} below threshold {threshold:.3e}")]
    Conditioning { rcond: f64, threshold: f64 },

    /// A value does not fit the fixed-point range of the masking codec.
    #[error("range error: {0}")]
    Range(String),

    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
