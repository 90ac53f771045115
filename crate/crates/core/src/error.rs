use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown domain id {id} (domain count {count})")]
    UnknownDomain { id: usize, count: usize },

    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("extent mismatch: {0}")]
    Extent(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
