//! Crate-wide error type with failure classes that map onto CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration problems: bad keys, out-of-range values, unparsable files.
    #[error("config error: {0}")]
    Config(String),

    /// Input data problems: malformed records, missing fields, misaligned corpora.
    #[error("data error: {0}")]
    Data(String),

    /// Reward-scorer failures: protocol violations, timeouts, unreachable endpoints.
    #[error("scorer error: {0}")]
    Scorer(String),

    /// Numeric failures: NaN losses, non-finite inputs, degenerate statistics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor/shape mismatches between model configuration and inputs.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this failure class. 0 is success and 2 is
    /// reserved for usage errors, so classes start at 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 4,
            Error::Scorer(_) => 5,
            Error::Numeric(_) | Error::Shape(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
