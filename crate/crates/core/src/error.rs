//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Shape or value violations on tensors and augmentation inputs.
#[derive(Error, Debug)]
pub enum ShapeError {
    #[error("expected {expected}, got {got}")]
    Mismatch { expected: String, got: String },
    #[error("right-angle rotation by {angle} deg requires a square image, got {h}x{w}")]
    NonSquareRotation { angle: u32, h: usize, w: usize },
    #[error("image dims {h}x{w} not divisible by grid {grid}")]
    IndivisibleGrid { h: usize, w: usize, grid: u32 },
    #[error("tensor values outside [0,1]")]
    OutOfRange,
    #[error("{0}")]
    Invalid(String),
}

/// Configuration validation failures (caught before any training starts).
#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("inconsistent settings: {0}")]
    Inconsistent(String),
    #[error("failed to parse config: {0}")]
    Parse(String),
}

/// Training-time failures.
#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite loss at stage {stage} step {step}{}", diagnostic_suffix(.checkpoint))]
    Diverged {
        stage: String,
        step: u64,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite scores passed to a loss function")]
    NonFiniteScores,
}

fn diagnostic_suffix(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (diagnostic checkpoint: {})", p.display()),
        None => String::new(),
    }
}

/// Dataset ingestion failures.
#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("anomaly test image {path} has no ground-truth mask")]
    MissingMask { path: PathBuf },
    #[error("unexpected dataset layout: {0}")]
    Layout(String),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("manifest problem: {0}")]
    Manifest(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Metric computation failures.
#[derive(Error, Debug)]
pub enum MetricError {
    #[error("AUROC undefined: only one class present")]
    SingleClass,
    #[error("pixel AUROC undefined: no pixel maps or single pixel class")]
    UndefinedPixelMetric,
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
}

/// Checkpoint persistence failures.
#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file: {0}")]
    BadMagic(PathBuf),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is for `{got}`, expected `{expected}`")]
    WrongKind { expected: String, got: String },
}

/// Umbrella error for pipeline runs; the CLI maps variants to exit codes.
#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
