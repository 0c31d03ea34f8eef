use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum VadeError {
    #[error("empty tensor shape {0:?}")]
    EmptyTensor(Vec<usize>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error(
        "matrix is not positive semi-definite (min eigenvalue {min_eig:e}, tolerance {tol:e})"
    )]
    NotPsd { min_eig: f64, tol: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("phantom geometry: {0}")]
    Geometry(String),

    #[error("dataset policy violation: {0}")]
    Policy(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss {loss} (initial {initial})")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
    },

    #[error("token id {id} out of range for vocabulary of {len}")]
    TokenOutOfRange { id: usize, len: usize },

    #[error("missing classes in manifest: {0:?}")]
    MissingClasses(Vec<String>),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl VadeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VadeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or unreadable input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            VadeError::ImageFormat(_)
                | VadeError::Checkpoint(_)
                | VadeError::Io { .. }
                | VadeError::Json(_)
                | VadeError::Policy(_)
                | VadeError::MissingClasses(_)
        )
    }

    pub fn is_numeric_divergence(&self) -> bool {
        matches!(self, VadeError::Diverged { .. } | VadeError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, VadeError>;
