use std::path::PathBuf;

use crate::synthdata::pnm::PnmError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("label {value} at position {index} is outside {{0, 1}}")]
    Label { index: usize, value: u8 },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value first produced by `{op}` (node {node}) while computing {context}")]
    NonFinite {
        op: String,
        node: u64,
        context: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Pnm {
        path: PathBuf,
        #[source]
        source: PnmError,
    },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 for bad configuration or input, 3 for I/O
    /// and file-format failures, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_)
            | Error::Json(_)
            | Error::Manifest { .. }
            | Error::Label { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidAxis { .. }
            | Error::InvalidShape(_)
            | Error::NonScalar(_) => 2,
            Error::Io { .. } | Error::Pnm { .. } | Error::Checkpoint(_) => 3,
            Error::NonFinite { .. } => 4,
        }
    }

    /// I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
