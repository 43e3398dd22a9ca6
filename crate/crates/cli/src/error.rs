use std::fmt;

use permfl_core::EngineError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_AUTH: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
    Auth(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Auth(_) => EXIT_AUTH,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Diverged(m) => write!(f, "diverged: {m}"),
            CliError::Auth(m) => write!(f, "authentication failure: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => CliError::Config(m),
            EngineError::Auth { .. } => CliError::Auth(e.to_string()),
            EngineError::TuningFailed => CliError::Diverged(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}
