use std::path::PathBuf;

use egmf_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = EgmfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EgmfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("sequence of length {len} exceeds max_seq_len {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EgmfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
