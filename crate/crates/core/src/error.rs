use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlavaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlavaError {
    #[error("config: field `{field}` violates {rule}: {detail}")]
    Config {
        field: String,
        rule: &'static str,
        detail: String,
    },
    #[error("config file: {0}")]
    ConfigFile(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("parameter `{name}` expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("mask plan: {0}")]
    MaskPlan(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("probabilities sum to {sum}, expected 1")]
    Probabilities { sum: f64 },
    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite loss `{loss}` at step {step} (batch {batch_id}); dump written to {dump:?}")]
    NonFinite {
        step: u64,
        loss: String,
        batch_id: String,
        dump: Option<PathBuf>,
    },
    #[error("checkpoint {path:?}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("io {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path:?}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FlavaError {
    /// Short machine-parsable category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            FlavaError::Config { .. } | FlavaError::ConfigFile(_) => "config",
            FlavaError::Shape(_)
            | FlavaError::TokenOutOfRange { .. }
            | FlavaError::ParamShape { .. }
            | FlavaError::MissingParam(_)
            | FlavaError::MaskPlan(_) => "shape",
            FlavaError::InsufficientData(_) | FlavaError::InvalidInput(_) => "input",
            FlavaError::Probabilities { .. } | FlavaError::StepOutOfRange { .. } => "range",
            FlavaError::NonFinite { .. } => "numeric",
            FlavaError::Checkpoint { .. } => "checkpoint",
            FlavaError::Io { .. } | FlavaError::Image { .. } => "missing_input",
            FlavaError::Json(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlavaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FlavaError::Shape(msg.into())
    }
}
