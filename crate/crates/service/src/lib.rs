//! Command line tools and the HTTP API over a metric store.

pub mod api;
pub mod cli;
pub mod error;
pub mod workload;

pub use error::{ApiError, CliError};
