use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid attention mask: row {row} has no attendable position")]
    InvalidMask { row: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("class {class} has {available} records but the split needs {needed}")]
    UnderfilledClass {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("non-finite loss at step {step} (batch {batch}): {detail}")]
    NonFinite { step: u64, batch: usize, detail: String },

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
