use std::io;

use thiserror::Error;

/// Errors produced by the diffusion engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched grid shapes, category counts or buffer lengths.
    #[error("shape error: {0}")]
    Shape(String),

    /// Floating-point breakdown (vanishing denominators, non-finite values).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration values or unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Structurally invalid input data (duplicates, out-of-range values).
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Prefix the message with `context`, keeping the error kind.
    pub fn context(self, context: &str) -> Self {
        match self {
            Error::Domain(m) => Error::Domain(format!("{context}: {m}")),
            Error::Shape(m) => Error::Shape(format!("{context}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
            Error::Config(m) => Error::Config(format!("{context}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{context}: {m}")),
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{context}: {message}"),
            },
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{context}: {e}"))),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
