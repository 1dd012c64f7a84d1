//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no active site")]
    EmptyMask,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("schedule needs at least 2 steps, got {0}")]
    InvalidSteps(usize),

    #[error("grid index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("cannot denoise below grid index 0")]
    IndexUnderflow,

    #[error("cannot invert above grid index {max}")]
    IndexOverflow { max: usize },

    #[error("object mask has no active site")]
    EmptyObjectMask,

    #[error("user box {x},{y},{w},{h} does not fit a {canvas_h}x{canvas_w} canvas")]
    BoxOutOfCanvas {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("object mask extends outside the user mask")]
    ObjectOutsideUserBox,

    #[error("timestep {t} outside the guided window [{lo}, {hi})")]
    OutsideWindow { t: usize, lo: usize, hi: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("nonfinite training loss {loss} at epoch {epoch}")]
    NonfiniteLoss { epoch: usize, loss: f64 },

    #[error("embedding norm underflow ({norm:e})")]
    DegenerateEmbedding { norm: f64 },

    #[error("gradient mode unsupported by this model bundle: {0}")]
    UnsupportedMode(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("nonfinite latent at grid index {index} ({context})")]
    NonfiniteLatent { index: usize, context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
