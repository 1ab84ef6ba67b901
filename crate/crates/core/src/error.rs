use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid array: {0}")]
    InvalidArray(String),

    #[error("input of length {len} exceeds the maximum sequence length {max}")]
    Overlong { len: usize, max: usize },

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("kto: batch contains only {present} points, both classes are required")]
    SingleClassBatch { present: &'static str },

    #[error("a {kind} checkpoint is required but none was provided")]
    MissingModel { kind: &'static str },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("infeasible hardness mix: wanted {wanted_hard} hard / {wanted_easy} easy pairs, achieved {achieved_hard} hard / {achieved_easy} easy")]
    InfeasibleHardness {
        wanted_hard: usize,
        wanted_easy: usize,
        achieved_hard: usize,
        achieved_easy: usize,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name, used for structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarRoot { .. } => "non_scalar_root",
            Error::InvalidArray(_) => "invalid_array",
            Error::Overlong { .. } => "overlong",
            Error::InvalidSequence(_) => "invalid_sequence",
            Error::EmptyBatch { .. } => "empty_batch",
            Error::SingleClassBatch { .. } => "single_class_batch",
            Error::MissingModel { .. } => "missing_model",
            Error::ModelMismatch(_) => "model_mismatch",
            Error::MissingParameter(_) => "missing_parameter",
            Error::Config { .. } => "config",
            Error::Ingest { .. } => "ingest",
            Error::Record { .. } => "record",
            Error::InfeasibleHardness { .. } => "infeasible_hardness",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
