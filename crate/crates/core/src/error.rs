use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a documented bound. `field` is a
    /// path such as `resources[0].beta`.
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    /// The configuration file could not be parsed.
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected} components, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A non-finite value appeared during a run.
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: u64, message: String },

    /// The baseline solver ran out of iterations.
    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("grid oracle refused instance: {0}")]
    OracleRefused(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 2 for configuration
    /// problems, 3 for numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::Dimension { .. } => 2,
            Error::InvalidParameter(_) => 2,
            Error::Numeric { .. } | Error::NoConvergence { .. } => 3,
            _ => 1,
        }
    }
}
