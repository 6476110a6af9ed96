use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library and the CLI harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("anchor pixel ({0}, {1}) is not inside the valid mask")]
    Anchoring(usize, usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no valid correspondences")]
    NoCorrespondences,

    #[error("empty mask")]
    EmptyMask,

    #[error("backward called without a matching forward pass")]
    MissingForwardContext,

    #[error("solver diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("feature extraction failed: {0}")]
    FeatureExtraction(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("not enough measurements: need at least {needed}, got {got}")]
    TooFewMeasurements { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
