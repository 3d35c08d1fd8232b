//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix factorization failed: {0}")]
    FactorizationFailed(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid network architecture: {0}")]
    InvalidArchitecture(String),

    #[error("stale tape: forward tape does not match parameters ({0})")]
    StaleTape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("model has not been warm-started")]
    NotWarmStarted,

    #[error("wrong online batch size: expected {expected}, got {got}")]
    WrongBatchSize { expected: usize, got: usize },

    #[error("invalid variance bounds: sigma_f ({sigma_f}) must exceed sigma_n ({sigma_n})")]
    InvalidVarianceBounds { sigma_f: f64, sigma_n: f64 },

    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model container version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code class for CLI reporting: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::InvalidArchitecture(_) => 1,
            Error::EmptyDataset
            | Error::ParseError { .. }
            | Error::HeaderMismatch(_)
            | Error::NonFiniteValue { .. }
            | Error::VersionMismatch { .. }
            | Error::Io(_)
            | Error::Serde(_)
            | Error::WrongBatchSize { .. } => 2,
            Error::FactorizationFailed(_)
            | Error::DimensionMismatch(_)
            | Error::StaleTape(_)
            | Error::NotWarmStarted
            | Error::InvalidVarianceBounds { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
