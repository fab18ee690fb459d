use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the RKN stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what}{}", time.map(|t| format!(" at time step {t}")).unwrap_or_default())]
    NonFinite { what: String, time: Option<usize> },

    /// A computed quantity left its valid domain, e.g. a belief lost
    /// positive definiteness to rounding at extreme magnitudes.
    #[error("numeric failure in {what}{}", time.map(|t| format!(" at time step {t}")).unwrap_or_default())]
    Numeric { what: String, time: Option<usize> },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>, time: Option<usize>) -> Self {
        Error::NonFinite {
            what: what.into(),
            time,
        }
    }
}

impl Error {
    /// True for failures caused by the numbers themselves (divergence), as
    /// opposed to bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric { .. })
    }

    /// Attaches a time index to numeric errors that lack one.
    pub fn at_time(self, t: usize) -> Self {
        match self {
            Error::NonFinite { what, time: None } => Error::NonFinite { what, time: Some(t) },
            Error::Numeric { what, time: None } => Error::Numeric { what, time: Some(t) },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
