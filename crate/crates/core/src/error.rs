//! Crate-wide error type.

/// Errors produced by model construction, algorithms and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes or lengths do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A numeric computation failed (singular system, non-finite value).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An experiment configuration is malformed.
    #[error("config error: {0}")]
    Config(String),
    /// A serialized model or dataset could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
