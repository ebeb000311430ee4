//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by corpus generation, model evaluation and training.
#[derive(Debug, Error)]
pub enum VoxError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of {len} tokens plus {prefix} prefix slots exceeds maximum length {max}")]
    SequenceTooLong {
        len: usize,
        prefix: usize,
        max: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoxError>;

impl VoxError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        VoxError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VoxError::Config(msg.into())
    }
}
