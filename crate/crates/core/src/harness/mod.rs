//! Experiment orchestration: configuration, the round loop, metrics and sweeps.

pub mod config;
pub mod run;
pub mod sweep;

pub use config::{DataConfig, ExperimentConfig, ModelConfig, OutputConfig, PrivacyBlock, RuleConfig, SecureConfig, ENV_PREFIX};
pub use run::{
    accountant_config, calibrate, final_accuracy, final_window_start, metrics_csv, read_metrics, run_experiment, setup, simulate,
    write_atomic, EpsilonTracker, MetricsRow, NoiseCalibration, RunFiles, RunResult, Setup, Summary, METRICS_HEADER,
};
pub use sweep::{sweep, Grid, SweepPoint, DEFAULT_MAX_POINTS};
