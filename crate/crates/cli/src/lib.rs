//! Command-line front end for the fusion models: training on the synthetic
//! tasks, cost-model sweeps, ablation grids and gradient checks, together
//! with the config-file and checkpoint formats they use.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
