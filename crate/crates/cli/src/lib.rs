//! Library side of the `pointconv` command-line tool: experiment configs,
//! verification workloads and the grid-convolution baseline. `main.rs` only
//! parses arguments and maps results to exit codes.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod grid_cnn;
pub mod verify;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] pointconv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use pointconv::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Format { .. } | E::Truncated { .. } => EXIT_IO,
                E::Config(_) | E::InvalidArgument(_) | E::Json(_) => EXIT_USAGE,
                _ => EXIT_VERIFY,
            },
        }
    }
}
