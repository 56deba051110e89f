use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("trace format error: {0}")]
    TraceFormat(String),
    #[error("truncated trace: expected {expected} bytes, found {actual}")]
    TruncatedTrace { expected: u64, actual: u64 },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for this error: 2 for usage/configuration problems,
    /// 1 for everything that went wrong at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema { .. } | Error::InvalidInput(_) => 2,
            _ => 1,
        }
    }
}
