//! Experiment driver for `saft-core`: TOML configs, sensitivity reports and
//! plots, paired SAFT-vs-full comparisons and the brute-force oracle.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use commands::{cmd_compare, cmd_oracle, cmd_sensitivity, cmd_train, TrainMode};
pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
