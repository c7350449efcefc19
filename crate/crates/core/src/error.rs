use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates one of its invariants.
    #[error("invalid configuration: {key}: {message}")]
    Config { key: String, message: String },

    /// No reference frame or no candidate survived filtering; the key frame is skipped.
    #[error("distillation unavailable: {0}")]
    DistillationUnavailable(&'static str),

    /// A loss was asked to average over an empty set; the step is skipped.
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
