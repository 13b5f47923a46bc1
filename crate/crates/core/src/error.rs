use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    /// A backward pass was given a cache that does not belong to the
    /// network state it is differentiating.
    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
