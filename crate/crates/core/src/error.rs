use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrnError>;

#[derive(Debug, Error)]
pub enum CrnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelBounds { label: usize, classes: usize },
    #[error("raw label id {0} has no entry in the remap table")]
    UnmappedLabel(u8),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CrnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CrnError::Json {
            path: path.into(),
            source,
        }
    }
}
