//! Library surface behind the `tsl` binary: config resolution and the
//! pipeline stages, exposed so tests and harnesses can drive runs directly.

pub mod config;
pub mod pipeline;

pub use config::{Ablate, ConfigError, PipelineConfig, ThresholdFrom};
pub use pipeline::{run_ablation, run_pipeline, run_repeated, synth_to_dir, RunArtifacts};
