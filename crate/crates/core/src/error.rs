use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Invalid configuration value or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss or gradient.
    #[error("numerical abort at step {step}: {detail}")]
    Numerical {
        step: usize,
        detail: String,
        /// JSON dump of the offending batch.
        dump: String,
    },
    /// Malformed serialized state (suites, checkpoints, params).
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        LabError::Parse(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
