use std::process::ExitCode;

use dsca_core::error::DscaError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    /// 0 success, 1 runtime, 2 config, 3 gradient check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Gradcheck(_) => 3,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl From<DscaError> for CliError {
    fn from(e: DscaError) -> Self {
        match e {
            DscaError::Config(_) | DscaError::UnknownVariant { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
