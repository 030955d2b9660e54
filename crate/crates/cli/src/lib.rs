//! File formats, configuration and subcommands for the `glucose` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{CliError, Result};
