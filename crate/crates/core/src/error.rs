use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VolgenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VolgenError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("config: {0}")]
    ConfigSyntax(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("{0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: non-finite {term}")]
    Divergence { step: u64, term: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),
}

impl VolgenError {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
