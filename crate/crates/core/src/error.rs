use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the library.
///
/// The CLI maps these onto process exit codes, so the split between
/// `Validation` and `Numeric` is part of the public contract.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or counts that do not line up (joint counts, tensor dims).
    #[error("structural error: {0}")]
    Structural(String),
    /// Inputs outside an operation's domain.
    #[error("validation error: {0}")]
    Validation(String),
    /// Degenerate or non-finite numerics.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Missing or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        }
    }
}
