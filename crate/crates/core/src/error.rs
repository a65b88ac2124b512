use std::path::PathBuf;

use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot(Shape),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid learning-rate schedule: {0}")]
    InvalidSchedule(String),

    #[error("frame index {index} out of range for {count} frames")]
    FrameOutOfRange { index: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate quaternion average: mean norm {0:e}")]
    DegenerateAverage(f64),

    #[error("staticness probability {0} outside the open interval (0, 1)")]
    StaticnessOutOfRange(f64),

    #[error("unsupported format version in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("non-finite loss at iteration {iteration} ({stage}): {breakdown}")]
    NonFiniteLoss {
        iteration: usize,
        stage: String,
        breakdown: String,
    },

    #[error("freeze contract violated: group `{group}` changed during {stage} iteration {iteration}")]
    FreezeViolation {
        group: String,
        stage: String,
        iteration: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
