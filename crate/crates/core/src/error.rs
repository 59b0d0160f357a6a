use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a tensor container (model or autoencoder weights).
#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("file too short for header")]
    Truncated,
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has offset {found}, expected {expected}")]
    Offset {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("blob size mismatch: manifest describes {expected} bytes, file holds {found}")]
    BlobSize { expected: usize, found: usize },
    #[error("tensor `{0}` contains NaN or infinite values")]
    NonFinite(String),
}
