//! Command-line driver for MDMLP: config parsing, the shipped configs and
//! the `inspect`, `train`, `eval` and `visualize` commands.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] mdmlp::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use mdmlp::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_OTHER,
            CliError::Core(e) => match e {
                E::Config(_) | E::Geometry(_) | E::Usage(_) => EXIT_CONFIG,
                E::Ingestion { .. } => EXIT_DATA,
                E::NonFinite { .. } => EXIT_NUMERIC,
                E::Shape(_) | E::Checkpoint(_) | E::Io(_) => EXIT_OTHER,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
