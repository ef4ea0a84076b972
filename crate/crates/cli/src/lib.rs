//! Library half of the `unimatch` binary: configuration, checkpoints and
//! the subcommand implementations, exposed so tests can drive them directly.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::{CliError, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
pub use config::{ConfigError, RunConfig};
