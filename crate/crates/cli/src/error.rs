use thiserror::Error;

/// Exit status for arbitrage found or a failed gradient check.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit status for usage, config, I/O and data errors.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] volimpute::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("refusing to resume, run config differs from the checkpoint:\n{0}")]
    ResumeMismatch(String),
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(volimpute::Error::Serialization(e.to_string()))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
