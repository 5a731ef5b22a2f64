use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("solver did not converge after {steps} steps (residual {residual:.3e})")]
    NotConverged { steps: usize, residual: f64 },

    #[error("domain is dry everywhere")]
    Dry,

    #[error("numerical blow-up: {0}")]
    Blowup(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("inversion aborted: {0}")]
    Inversion(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures of the numerics rather than of inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::Dry
                | Error::Blowup(_)
                | Error::Factorization(_)
                | Error::Inversion(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
