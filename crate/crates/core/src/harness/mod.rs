//! Experiment configuration, deterministic RNG streams, runners, metrics,
//! and file outputs.

pub mod config;
pub mod metrics;
pub mod output;
pub mod rng;
pub mod runner;

pub use config::{AlgorithmSpec, AnchorLayout, ConfigError, ExperimentConfig, SceneSpec};
pub use metrics::{aggregate, Aggregates, ReplicateResult, TraceRow};
pub use output::write_outputs;
pub use runner::{run_experiment, RunError};
