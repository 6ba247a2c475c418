use resformer::Error as CoreError;

use crate::config::ConfigErrors;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_TOLERANCE: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),

    #[error("configuration error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("tolerance failure: {0}")]
    Tolerance(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::Range(_) | CoreError::Construction { .. } => CliError::Usage(msg),
            CoreError::NonFinite(_) => CliError::Numerical(msg),
            CoreError::Vocabulary { .. }
            | CoreError::Label { .. }
            | CoreError::Batching { .. }
            | CoreError::Evaluation(_)
            | CoreError::Spec(_)
            | CoreError::Split(_)
            | CoreError::MalformedLine { .. }
            | CoreError::UnknownKeys { .. }
            | CoreError::DuplicateIndex { .. }
            | CoreError::NonContiguous { .. }
            | CoreError::UnknownLabel(_)
            | CoreError::Checkpoint(_)
            | CoreError::Io { .. } => CliError::Data(msg),
            CoreError::Dimension(_) | CoreError::EmptyMemory | CoreError::EmptyHistory => CliError::Other(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
