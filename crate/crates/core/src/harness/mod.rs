//! Experiment harness behind the `pfld` command-line tool.

pub mod commands;
pub mod config;
pub mod problem;
pub mod report;
pub mod verify;

pub use commands::{cmd_compare_baseline, cmd_run, cmd_sweep_particles, cmd_sweep_pruning, run_seed};
pub use config::ExperimentConfig;
pub use problem::Problem;
pub use report::RunReport;
