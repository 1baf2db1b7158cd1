use thiserror::Error;

use crate::readout::FitFailure;

pub type Result<T, E = NvarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NvarError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration blew up at step {step}")]
    IntegrationBlowup { step: usize },

    #[error("feature `{feature}` evaluated to a non-finite value")]
    FeatureEvaluation { feature: String },

    #[error("trajectory too short: need at least {needed} columns, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("feature index is missing required feature `{0}`")]
    MissingFeature(String),

    #[error("prediction diverged at step {step}")]
    Diverged { step: usize },

    #[error("feature indices differ")]
    IndexMismatch,

    #[error("zero standard deviation in dimension {0}")]
    ZeroStd(usize),

    #[error("trajectories are not aligned: {0}")]
    Misaligned(String),

    #[error(transparent)]
    Fit(#[from] FitFailure),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
