use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the summarization stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error at step {step}: {message}")]
    Training {
        step: usize,
        message: String,
        last_good: Option<PathBuf>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient diversity: {distinct} distinct candidate(s) after {tried} decodes")]
    InsufficientDiversity { distinct: usize, tried: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
