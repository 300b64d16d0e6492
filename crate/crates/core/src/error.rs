use std::io;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed NIfTI file: {0}")]
    Format(String),

    #[error("unsupported NIfTI content: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid normalization condition: contrast combination {0:#06b}")]
    InvalidCondition(u8),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("cannot sample training data: {0}")]
    Unsampleable(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
