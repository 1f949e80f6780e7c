//! Configuration, pipeline orchestration and reporting for the `hbdc` binary.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{default_config, DatasetSource, GenerateSpec, Mode, PipelineConfig};
pub use pipeline::{run_pipeline, PipelineRun, RunResults};
