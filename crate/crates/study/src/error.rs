use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("session {session} already answered trial {trial}")]
    Conflict { session: String, trial: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no usable responses after sentinel filtering")]
    EmptyResult,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, StudyError>;

impl StudyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StudyError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        StudyError::Json {
            path: path.into(),
            source,
        }
    }
}
