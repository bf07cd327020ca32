use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detector pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("target length {len} outside [2, {max}]")]
    TargetLength { len: usize, max: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("parse error in {path}: {message} (line {line}, offset {offset})")]
    Parse {
        path: PathBuf,
        line: usize,
        offset: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
