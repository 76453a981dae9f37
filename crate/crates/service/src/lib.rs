//! HTTP session service and command-line front end for the two-stage
//! dialogue retrieval library.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
