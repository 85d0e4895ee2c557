use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("PLY parse error at byte {offset}: {message}")]
    PlyParse { offset: usize, message: String },

    #[error("PLY is missing required vertex property `{0}`")]
    PlyMissingProperty(String),

    #[error("non-finite parameter in gaussian {index}")]
    NonFiniteGaussian { index: usize },

    #[error("point {index} is behind the camera")]
    BehindCamera { index: usize },

    #[error("backward called before a forward pass was recorded")]
    NoForwardRecord,

    #[error("latent became non-finite at step {step}")]
    NonFiniteLatent { step: usize },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("trajectory cache is missing step {0}")]
    MissingTrajectoryStep(usize),

    #[error("mask is empty; nothing can be refit")]
    EmptyMask,

    #[error("expected {expected} views, got {got}")]
    ViewCount { expected: usize, got: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI and HTTP layers.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "SHAPE",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::PlyParse { .. } => "PLY_PARSE",
            Error::PlyMissingProperty(_) => "PLY_MISSING_PROPERTY",
            Error::NonFiniteGaussian { .. } => "NON_FINITE_GAUSSIAN",
            Error::BehindCamera { .. } => "BEHIND_CAMERA",
            Error::NoForwardRecord => "NO_FORWARD",
            Error::NonFiniteLatent { .. } => "NON_FINITE_LATENT",
            Error::NonFiniteGradient { .. } => "NON_FINITE_GRADIENT",
            Error::MissingTrajectoryStep(_) => "MISSING_TRAJECTORY_STEP",
            Error::EmptyMask => "EMPTY_MASK",
            Error::ViewCount { .. } => "VIEW_COUNT",
            Error::Checkpoint(_) => "CHECKPOINT",
            Error::Config(_) => "CONFIG",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
