use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("checkpoint {0} not found")]
    MissingCheckpoint(PathBuf),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint {path} has format version {found}, this build reads version {expected}")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("checkpoint {path} holds a {found}, expected a {expected}")]
    WrongComponent {
        path: PathBuf,
        found: &'static str,
        expected: &'static str,
    },
    #[error("data {path}: {source}")]
    Data {
        path: PathBuf,
        source: photoreg_core::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] photoreg_core::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::CorruptCheckpoint { .. } | CliError::CheckpointVersion { .. } | CliError::WrongComponent { .. } => 5,
            CliError::Data { .. } => 6,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl ToString) -> Self {
        CliError::Config {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
