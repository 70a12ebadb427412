//! Stage-wise command-line pipeline over `har-core`: dataset generation,
//! encoder and classifier training in both framework modes, evaluation,
//! SHAP explanation, compression and a consolidated report. All artifacts
//! live in one output directory next to a `manifest.json` that records the
//! config hash, seeds and per-stage metrics.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, PipelineConfig, OUT_DIR_ENV};
pub use error::{CliError, CliResult};
pub use stages::{run_all, RunContext, Stage};
