use std::path::PathBuf;

/// Errors produced anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cannot L2-normalize a zero vector")]
    ZeroNorm,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("mechanism {0} requires a text [CLS] token")]
    MissingTextCls(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("object placement failed after {0} attempts")]
    Placement(usize),
    #[error("degenerate box {0:?}: each side must be at least 2 px")]
    DegenerateBox([usize; 4]),
    #[error("mask is empty")]
    EmptyMask,
    #[error("category {0} has no evaluation samples")]
    MissingClass(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
