//! Experiment harness for the federated segmentation simulation: config
//! parsing, the three training regimes, checkpointing, results persistence,
//! and plot emission. The `fiva` binary is a thin wrapper over this crate.

pub mod checkpoint;
pub mod config;
pub mod plots;
pub mod results;
pub mod run;

pub use config::{ExperimentConfig, InferenceChoice, Regime, StrategyChoice};
pub use results::{ResultsRow, RunSummary};
pub use run::{evaluate_checkpoint, prepare, run_experiment};
