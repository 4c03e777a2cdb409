use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

/// Exit codes, stable per error class.
pub mod code {
    pub const GRADCHECK_FAILED: u8 = 1;
    /// Unknown flags, malformed values, missing arguments.
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const RUNTIME: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] incepformer::Error),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },

    #[error("{failed} of {total} gradient checks exceeded the tolerance")]
    GradcheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        CliError::Io {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        use incepformer::Error as E;
        ExitCode::from(match self {
            CliError::GradcheckFailed { .. } => code::GRADCHECK_FAILED,
            CliError::Config(_) | CliError::Core(E::Config { .. } | E::Parse { .. }) => code::CONFIG,
            CliError::Io { .. } | CliError::Core(E::Io { .. } | E::Checkpoint(_)) => code::IO,
            CliError::Core(_) => code::RUNTIME,
        })
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
