use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("batch norm needs more than one value per channel in training mode (got {0})")]
    DegenerateVariance(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid backbone spec: {0}")]
    Spec(String),

    #[error("alignment error at layer {layer}: tuning path {side:?} vs backbone {backbone:?}")]
    Alignment {
        layer: usize,
        side: Vec<usize>,
        backbone: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(#[from] crate::data::DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
