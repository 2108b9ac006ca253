//! Simulation harness around `m4sc-core`: experiment configuration, training
//! orchestration with checkpoints, sharing and SNR sweeps, metric files, and
//! the `m4sc` command-line tool.

pub mod config;
pub mod io;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use config::ExperimentConfig;
pub use metrics::{emit_metrics, MetricsRow, CSV_HEADER};
pub use sweep::SweepParam;
