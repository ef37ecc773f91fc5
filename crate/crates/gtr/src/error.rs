use std::path::PathBuf;

use gtr_core::error::ErrorClass;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gtr_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not parse.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingest error: {0}")]
    Ingest(String),
}

/// Process exit codes by error class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitCode {
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Format { path: path.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => ExitCode::Config,
                ErrorClass::Data => ExitCode::Data,
                ErrorClass::Numeric => ExitCode::Numeric,
            },
            CliError::Io { .. } => ExitCode::Io,
            CliError::Format { .. } | CliError::Ingest(_) => ExitCode::Data,
            CliError::Config(_) => ExitCode::Config,
        }
    }
}
