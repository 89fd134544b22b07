//! File formats, configuration and subcommands for the `axform` tool.

pub mod checkpoint;
pub mod cli;
pub mod cloud_io;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod manifest;
pub mod report;

pub use config::RunConfig;
pub use error::{AppError, AppResult, FormatError};
