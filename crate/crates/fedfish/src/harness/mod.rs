//! Operational shell: experiment configuration, dataset ingestion, trial
//! orchestration, and report emission.
//!
//! The flow is `ExperimentConfig` (TOML) -> `DataSource` -> `run_experiment`
//! or `run_sweep` -> `Report` (CSV table plus a JSON sidecar with full
//! per-trial detail).

pub mod config;
pub mod data;
pub mod experiment;

pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, DATA_DIR_ENV};
pub use data::{gen_synthetic, load_mnist, DataSource};
pub use experiment::{run_experiment, run_sweep, Report, Stage, SweepAxis, TrialRow};
