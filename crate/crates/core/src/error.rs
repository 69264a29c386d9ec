use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("clip dimensions not divisible along {axis}: {size} is not a multiple of {patch}")]
    Divisibility {
        axis: &'static str,
        size: usize,
        patch: usize,
    },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("unknown tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite {what} at step {step}")]
    Diverged { what: String, step: u64 },

    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint payload is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("checkpoint hash mismatch for tensor `{0}`")]
    HashMismatch(String),

    #[error("shape manifest mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ManifestMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("teacher does not match: expected content hash {expected}, found {found}")]
    TeacherMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that mean a stored artifact does not fit what the caller expected.
    pub fn is_artifact_mismatch(&self) -> bool {
        matches!(
            self,
            Error::ManifestMismatch { .. } | Error::MissingTensor(_) | Error::TeacherMismatch { .. }
        )
    }
}
