//! Experiment runner for the `adamole` crate: JSON configs, training runs,
//! tau_max sweeps, gradient checks and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{resolve, ExperimentConfig, ModeArg, Overrides};
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, sweep, write_artifacts, write_sweep_csv, Metrics, RunOutput, SweepRow};
