//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Broad failure class, used by the CLI to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or contract violations at an API boundary.
    Usage,
    /// Problems with input data: files, manifests, images, configs.
    Data,
    /// Problems with model state: missing or malformed checkpoints.
    Model,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimensions {height}x{width} not divisible by patch size {patch_size}")]
    DimensionMismatch {
        height: usize,
        width: usize,
        patch_size: usize,
    },
    #[error("proportion {0} outside [0, 1]")]
    ProportionOutOfRange(f64),
    #[error("grid shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    GridShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("occluder placed out of bounds: position ({row}, {col}), occluder {occ_h}x{occ_w}, image {img_h}x{img_w}")]
    OutOfBounds {
        row: usize,
        col: usize,
        occ_h: usize,
        occ_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("pixel value {0} outside [0, 1]")]
    PixelOutOfRange(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    LatentDimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("probability vector sums to {0}, expected 1 within 1e-5")]
    ProbabilityNotNormalized(f64),
    #[error("invalid expression class index {0} (expected 0..7)")]
    InvalidClassIndex(usize),
    #[error("every patch is occluded; nothing unmasked to condition reconstruction on")]
    FullyOccluded,
    #[error("model stage `{0}` is not loaded or not trained")]
    MissingModel(&'static str),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("manifest not found: {0}")]
    ManifestMissing(PathBuf),
    #[error("bad label {label} at manifest row {row} (expected 0..=6)")]
    BadLabel { row: usize, label: String },
    #[error("unreadable image `{path}` at manifest row {row}: {reason}")]
    UnreadableImage {
        row: usize,
        path: PathBuf,
        reason: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("png decode/encode error: {0}")]
    Png(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Classifies the failure for exit-code mapping: data problems exit 2,
    /// model problems exit 3, everything else is a usage error (exit 1).
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            ManifestMissing(_) | BadLabel { .. } | UnreadableImage { .. } | Config(_)
            | Png(_) | Io { .. } | Json(_) | PixelOutOfRange(_) => ErrorClass::Data,
            MissingModel(_) | CheckpointFormat(_) | FullyOccluded => ErrorClass::Model,
            _ => ErrorClass::Usage,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
