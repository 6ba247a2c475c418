use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("memory has no tokens to attend to")]
    EmptyMemory,

    #[error("reservoir group has not taken any step yet")]
    EmptyHistory,

    #[error("reservoir construction failed for seed {seed}: {reason}")]
    Construction { seed: u64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("label {label} is outside [0, {classes})")]
    Label { label: usize, classes: usize },

    #[error("batch crosses corpus boundary ({first} -> {second})")]
    Batching { first: String, second: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("infeasible synthetic task: {0}")]
    Spec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: unknown keys {keys:?}")]
    UnknownKeys { line: usize, keys: Vec<String> },

    #[error("corpus {corpus_id}: duplicate index {index}")]
    DuplicateIndex { corpus_id: String, index: usize },

    #[error("corpus {corpus_id}: indices are not contiguous from 0 (missing {missing})")]
    NonContiguous { corpus_id: String, missing: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
