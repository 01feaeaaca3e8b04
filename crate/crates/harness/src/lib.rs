//! Command-line harness over `synmoe-core`: gradient verification, staged
//! toy training, routing telemetry, ablations, coordinate lifting and CSQA
//! generation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
