use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point at depth {depth} is not in front of the camera")]
    NonPositiveDepth { depth: f64 },

    #[error("target does not project into the image")]
    TargetNotVisible,

    #[error("{0} depths supplied for {1} feature points")]
    DepthCountMismatch(usize, usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid architecture at layer {index}: {reason}")]
    InvalidArchitecture { index: usize, reason: String },

    #[error("no forward pass matches the current network parameters")]
    StaleForwardState,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("sampling range rejected {0} consecutive poses as out of view")]
    UnviableRange(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Configuration errors are the caller's fault; everything else is a
    /// runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidSplit(_)
                | Error::InvalidArchitecture { .. }
                | Error::DepthCountMismatch(..)
                | Error::DimensionMismatch(_)
        )
    }
}
