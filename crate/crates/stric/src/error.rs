//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StricError {
    /// Invalid configuration (bad hyper-parameter, unknown key, ...).
    #[error("config error: {0}")]
    Config(String),
    /// Invalid or malformed data (shape mismatch, non-finite value, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failure (divergence, factorization failure, non-finite loss).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StricError>;

impl StricError {
    pub fn config(msg: impl Into<String>) -> Self {
        StricError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        StricError::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        StricError::Numeric(msg.into())
    }
}
