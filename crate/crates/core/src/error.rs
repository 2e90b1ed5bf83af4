use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("negative input {value} to sqrt at coordinate {index}")]
    NegativeSqrt { index: usize, value: f64 },

    #[error("nonpositive denominator {value} at coordinate {index}")]
    NonPositiveDenominator { index: usize, value: f64 },

    #[error("nonfinite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("invalid client id {client} (n = {n})")]
    InvalidClient { client: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty update buffer")]
    EmptyBuffer,

    #[error("nonfinite local iterate at step {step}")]
    DivergedLocal { step: usize },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
