#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! File formats, configuration and subcommands for the `roma` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
