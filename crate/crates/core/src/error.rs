use thiserror::Error;

use crate::numerics::NumericError;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("validation: {0}")]
    Validation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
