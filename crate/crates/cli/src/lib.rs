//! File formats and run management around `qatten-core`: strict JSON run
//! configs, metric logs, checksummed checkpoints, attention exports and
//! verification reports.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod run;

pub use error::{CliError, Result};

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "QATTEN_LAB_OUT";

/// Directory that relative output paths are resolved against.
pub fn output_root() -> std::path::PathBuf {
    std::env::var_os(OUT_ENV)
        .map(Into::into)
        .unwrap_or_else(|| std::path::PathBuf::from("."))
}
