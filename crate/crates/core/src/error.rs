use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive camera depth ({0:.3e})")]
    NonPositiveDepth(f64),
    #[error("degenerate plane: |d| = {0:.3e}")]
    DegeneratePlane(f64),
    #[error("homogeneous coordinate too close to zero ({0:.3e})")]
    PointAtInfinity(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("viewing ray is parallel to the plane")]
    RayParallelToPlane,
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("render buffers carry no contributor records")]
    MissingContributorRecords,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample ({x:.3}, {y:.3}) outside image bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("pixel ({0}, {1}) lacks a valid 4-neighbourhood")]
    InvalidNeighborhood(usize, usize),
    #[error("bad file header: {0}")]
    BadHeader(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("no source views supplied")]
    NoSourceViews,
    #[error("dataset has {available} views, need at least {required}")]
    TooFewViews { available: usize, required: usize },
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("non-finite total loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("volume holds no observed cells")]
    EmptyVolume,
    #[error("empty point set passed to metric")]
    EmptySet,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("missing cameras.json in {0}")]
    MissingCameras(PathBuf),
    #[error("view {view}: image is {found:?}, cameras.json declares {expected:?}")]
    ResolutionMismatch {
        view: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("bad JSON: {0}")]
    BadJson(#[from] serde_json::Error),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
