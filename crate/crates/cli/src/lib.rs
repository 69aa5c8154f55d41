//! Command implementations for the `dcmtl` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{resolve, RunConfig};
pub use error::{CliError, CliResult};
