//! Experiment plumbing around `rft-core`: configuration, the staged
//! pipeline, evaluators and figure-data exports.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use pipeline::Pipeline;
