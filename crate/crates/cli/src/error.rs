use std::process::ExitCode;

use thiserror::Error;

/// Failures of a subcommand, each tied to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Internal(String),

    #[error(transparent)]
    Core(#[from] hman::Error),

    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> u8 {
        use hman::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Format(_) => 3,
            CliError::Internal(_) | CliError::Verify(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) | E::Geometry(_) => 2,
                E::Io(_) | E::Format { .. } => 3,
                E::Dimension { .. } | E::BatchSize { .. } | E::Numeric(_) | E::Unit(..) => 1,
            },
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

pub type CliResult<T> = Result<T, CliError>;
