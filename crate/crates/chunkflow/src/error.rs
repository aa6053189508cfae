//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. non-scalar loss, zero axis).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf surfaced where finite values are required; names the offender.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Token/byte stream could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    /// Training loss diverged past the abort threshold.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Required input artifacts are missing; lists every expected path.
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
