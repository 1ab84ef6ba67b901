//! Training loops, evaluation, run directories and experiment manifests.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod run;
pub mod stages;

pub use config::{apply_override, merge, EvalSettings, Inputs, RunConfig, Stage, TrainLoop};
pub use eval::{Bucket, Comparison, EvalReport, PolicyEval, ScorerEval, Scorer};
pub use experiment::{run_experiment, write_report, ExperimentManifest, ExperimentReport, ManifestStage};
pub use run::{RunDir, StageReport};
pub use stages::{config_digest, run_stage, run_stage_with, RunContext};
