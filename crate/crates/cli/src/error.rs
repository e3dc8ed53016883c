//! Error type with the exit-code contract: validation failures exit 1,
//! runtime failures exit 2.

use icdex_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input data, configuration, or arguments.
    #[error("{0}")]
    Validation(String),
    /// IO, network, or numeric failures at run time.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// IO errors are runtime errors, annotated with the path.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {}", path.display(), e))
}
