//! Command line and local review API for the phase-localization pipeline.

pub mod api;
pub mod cli;
pub mod config;

pub use cli::{run, CliError};
