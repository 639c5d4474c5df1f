//! Experiment configuration, the round loop, JSONL telemetry and reports.

mod config;
mod report;
mod runner;

pub use config::{parse_config, DatasetSpec, DriftIsolation, ExperimentConfig, Method, PartitionSpec};
pub use report::{
    expand_glob, mask_keys, mask_timing, plot_series, read_series, read_summary, stats_to_csv, summarize, CellStats,
};
pub use runner::{run_experiment, sample_clients, GdOracle, GdRecord, RoundLog, RunSummary, Simulator};
