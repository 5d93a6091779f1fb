//! Library surface of the experiment driver, exposed so integration
//! tests can run the pipeline in-process.

pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod threads;

pub use config::RunConfig;
pub use error::{CliError, Result};
