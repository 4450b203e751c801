//! Command-line front end: file formats, configuration, a thread-pool batch
//! runner and the subcommands built on `echo-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod runner;
pub mod store;

pub use config::Config;
pub use error::{CliError, Result};
