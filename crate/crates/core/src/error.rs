use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid parameter vector length: expected {expected}, got {got}")]
    InvalidLength { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective term `{term}` is not finite at sample {index}")]
    NonFiniteObjective { term: &'static str, index: usize },

    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("grid does not cover the support: {0}")]
    Coverage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    /// Process exit code for the command-line front end: 1 for numeric
    /// failures, 2 for I/O and argument failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::InvalidArgument(_) => 2,
            Error::DimensionMismatch { .. } | Error::InvalidLength { .. } => 2,
            _ => 1,
        }
    }
}
