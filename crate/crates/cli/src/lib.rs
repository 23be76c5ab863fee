//! Command-line interface and HTTP service for the lens pipeline.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use error::CliError;
