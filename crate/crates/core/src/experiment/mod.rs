//! Experiment orchestration: configuration, the training pipeline, run
//! logs, and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod runlog;
pub mod svg;
pub mod tasks;

pub use config::ExperimentConfig;
pub use pipeline::{run_aop, RunOptions, RunOutcome};
pub use runlog::{ModelKind, RunLog, RunRow};
