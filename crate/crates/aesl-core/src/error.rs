//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AeslError>;

#[derive(Debug, Error)]
pub enum AeslError {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("backward requires a scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("row {row} has zero centered norm; cosine similarity is undefined for it")]
    ZeroCenteredNorm { row: usize },

    #[error("label propagation did not converge after {iterations} iterations (residual {residual:.3e})")]
    PropagationDiverged { iterations: usize, residual: f64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("zero variance in {what}; correlation is undefined")]
    ZeroVariance { what: &'static str },

    #[error("degenerate rank table: {0}")]
    DegenerateRanks(String),

    #[error("training diverged in task {task}, epoch {epoch}: {component} is not finite")]
    TrainingDiverged {
        component: &'static str,
        task: usize,
        epoch: usize,
    },

    #[error("run {run}: {source}")]
    RunFailed {
        run: String,
        #[source]
        source: Box<AeslError>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AeslError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AeslError::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        AeslError::Validation(msg.into())
    }
}
