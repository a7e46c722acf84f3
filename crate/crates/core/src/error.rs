use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty boundary: {0}")]
    EmptyBoundary(String),

    #[error("region generation failed for case {case_index} after {attempts} attempts")]
    PlacementFailed { case_index: usize, attempts: usize },

    #[error("dataset error for case {case_id}: {reason}")]
    Dataset { case_id: String, reason: String },

    #[error("corrupt manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch} step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("data leakage: case {0} appears in both train and test splits")]
    Leakage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape<T: std::fmt::Debug>(context: impl Into<String>, expected: T, actual: T) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
