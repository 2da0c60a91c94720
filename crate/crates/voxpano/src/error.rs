//! Crate-wide error type with stable diagnostic codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("array format error in {path}: {reason}")]
    NpyFormat { path: String, reason: String },

    #[error("scene capacity exceeded: {0}")]
    Capacity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-parseable code, used as the prefix of every CLI diagnostic.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E-SHAPE",
            Error::Validation(_) => "E-VALID",
            Error::Taxonomy(_) => "E-TAX",
            Error::OutOfBounds(_) => "E-OOB",
            Error::NpyFormat { .. } => "E-NPY",
            Error::Capacity(_) => "E-CAP",
            Error::Io { .. } => "E-IO",
        }
    }

    /// CLI exit code: 1 for validation-class failures, 2 for i/o failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
