use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input row or header. `line` is 1-based and counts the header.
    #[error("{msg} at line {line}")]
    Parse { line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty risk set at t = {0}")]
    EmptyRiskSet(f64),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("{failed} of {total} replicates failed, last error: {last}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        last: String,
    },
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures caused by the numerical routines rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NoConvergence { .. }
                | Error::Quadrature(_)
                | Error::TooManyFailures { .. }
                | Error::EmptyRiskSet(_)
        )
    }
}
