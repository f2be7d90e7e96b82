//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel values outside declared range in `{source_id}`: found [{min}, {max}], expected [{lo}, {hi}]")]
    PixelRange {
        source_id: String,
        min: f32,
        max: f32,
        lo: f32,
        hi: f32,
    },

    #[error("image `{source_id}` is not square: {height}x{width}")]
    NotSquare {
        source_id: String,
        height: usize,
        width: usize,
    },

    #[error("value range mismatch: expected {expected}, got {actual}")]
    ValueRange {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("side length {d} not divisible by 32 (five downsampling stages)")]
    SideNotDivisible { d: usize },

    #[error("empty domain: no usable images in {path}")]
    EmptyDomain { path: PathBuf },

    #[error("inconsistent image shape in `{file}`: got {got}, expected {expected}")]
    InconsistentShape {
        file: String,
        got: String,
        expected: String,
    },

    #[error("failed to read `{file}`: {reason}")]
    UnreadableFile { file: String, reason: String },

    #[error("identifier `{id}` appears in both input and target domains")]
    DomainOverlap { id: String },

    #[error("invalid patch configuration: rho={rho}, j1={j1}, j2={j2}, d={d}: {reason}")]
    InvalidPatchConfig {
        rho: f64,
        j1: usize,
        j2: usize,
        d: usize,
        reason: &'static str,
    },

    #[error("batch size mismatch: {what} has {got} elements, expected {expected}")]
    BatchMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("shape mismatch: {what}: got {got}, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        got: String,
        expected: String,
    },

    #[error("negative weight for {what}: {value}")]
    NegativeWeight { what: &'static str, value: f64 },

    #[error("invalid network spec: {reason}")]
    InvalidSpec { reason: String },

    #[error("non-finite loss at step {step} ({phase}): diagnostic checkpoint written to {checkpoint:?}")]
    NonFiniteLoss {
        step: u64,
        phase: &'static str,
        checkpoint: Option<PathBuf>,
    },

    #[error("nonpositive scale value encountered in uncertainty loss (invariant breach upstream)")]
    NonpositiveScale,

    #[error("checkpoint file missing: {path}")]
    CheckpointMissing { path: PathBuf },

    #[error("corrupt checkpoint `{path}`: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },

    #[error("checkpoint spec hash mismatch: file has {found}, expected {expected}")]
    SpecHashMismatch { found: String, expected: String },

    #[error("operation requires mode UAPI but checkpoint/model is in mode {mode}")]
    UnsupportedMode { mode: String },

    #[error("evaluation requires ground-truth pairs but none are present")]
    MissingGroundTruth,

    #[error("unknown perturbation scenario `{name}`")]
    UnknownScenario { name: String },

    #[error("empty grid for lambda search")]
    EmptyGrid,

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
