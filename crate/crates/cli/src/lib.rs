//! Command-line driver for the `opmix` mixed-model library.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

pub use error::{CliError, CliResult};
