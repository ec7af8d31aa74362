use thiserror::Error;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or config values.
    #[error("usage error: {0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite loss or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<voxmim::Error> for CliError {
    fn from(e: voxmim::Error) -> Self {
        match e {
            voxmim::Error::Numeric(m) => CliError::Numeric(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
