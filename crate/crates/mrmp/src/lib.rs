//! Datasets, graph files, checkpoints, run configuration and the command
//! implementations behind the `mrmp` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod synthetic;

pub use error::{CliError, Result};
