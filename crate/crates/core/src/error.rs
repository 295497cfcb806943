//! Crate-wide error type.
//!
//! Variants mirror the failure classes the library distinguishes: bad
//! arguments and shape mismatches at graph construction, non-finite values
//! during training, malformed or corrupted files, and architecture
//! incompatibilities when initializing students from teachers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric error at {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption detected: {0}")]
    Corruption(String),

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
