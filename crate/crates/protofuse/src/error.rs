//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data was readable but semantically unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A text input could not be parsed.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// An iterative solver stopped before reaching its tolerance.
    #[error("convergence failure: {message} (achieved residual {residual:.3e})")]
    Convergence { message: String, residual: f64 },

    /// A requested statistic is undefined for the given data.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Risk stratification cannot split the cohort.
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    /// Verification suite reported at least one failing check.
    #[error("verification failure: {0}")]
    Verification(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 ok, 2 argument, 3 data, 4 convergence,
    /// 5 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::UndefinedMetric(_)
            | Error::DegenerateSplit(_)
            | Error::Io { .. } => 3,
            Error::Convergence { .. } => 4,
            Error::Verification(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
