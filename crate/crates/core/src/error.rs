use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("input has no data rows")]
    EmptyInput,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("column `{0}` has no observed value and cannot be scaled")]
    UnscalableColumn(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("mechanism unsupported: {0}")]
    Unsupported(String),

    #[error("index {index} out of bounds (limit {limit})")]
    Bounds { index: usize, limit: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
