//! Experiment driver: TOML configs, method and seed sweeps, per-round
//! metric CSVs and across-seed summaries.

pub mod config;
pub mod error;
pub mod runner;
pub mod summary;

pub use config::{parse_config, ExperimentConfig, Variant};
pub use error::CliError;
pub use runner::{run, RunOptions};
pub use summary::{format_table, summarize_dir, RunSummary};
