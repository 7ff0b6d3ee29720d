use std::path::PathBuf;

use crate::autodiff::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DrimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{file}, row {row}: {msg}")]
    Malformed {
        file: PathBuf,
        row: usize,
        msg: String,
    },
    #[error("non-finite input for patient {patient}, modality {modality}")]
    NonFiniteInput { patient: usize, modality: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("no modality available for patient {0}")]
    NoModality(usize),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DrimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DrimError> = std::result::Result<T, E>;
