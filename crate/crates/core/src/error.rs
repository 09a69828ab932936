use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter outside the domain of an operator (σ ≤ 0, rank too large, ...).
    #[error("{0}")]
    Domain(String),

    /// Malformed or inconsistent input data.
    #[error("{0}")]
    Validation(String),

    /// A metric whose denominator vanished.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// SVD failure or non-finite values reaching a numerical kernel.
    #[error("{0}")]
    Numerical(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category tag used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Validation(_) => "validation",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Numerical(_) => "numerical",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 usage, 2 data/validation, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
