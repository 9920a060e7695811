use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulation and inference pipeline.
///
/// The variants split into two families: [`Error::is_validation`] returns
/// true for bad inputs (malformed files, out-of-range values, missing paths)
/// and false for failures that happen while computing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration failed at step {step} (t = {t_min} min): state component `{component}` is not finite")]
    Integration {
        step: usize,
        t_min: f64,
        component: &'static str,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("acceptance rate {rate:.4} below floor {floor:.4} after {attempted} candidates")]
    LowAcceptance {
        rate: f64,
        floor: f64,
        attempted: usize,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than by computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Domain(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::Refused(_) => true,
            Error::Io { source, .. } => matches!(
                source.kind(),
                io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied | io::ErrorKind::InvalidData
            ),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
