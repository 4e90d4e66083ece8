//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum PimError {
    #[error("channel {channel} has {valid} valid samples, need at least 2")]
    AllNaNChannel { channel: usize, valid: usize },

    #[error("series has {n_samples} samples, window needs {window_len}")]
    SeriesTooShort { n_samples: usize, window_len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cutoff {cutoff_hz} Hz is not inside (0, {nyquist_hz}) Hz")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },

    #[error("filter needs more than {min_len} samples, got {len}")]
    SeriesTooShortForFilter { len: usize, min_len: usize },

    #[error("shift {shift} leaves no overlap between sequences of length {len1} and {len2}")]
    NoOverlap {
        shift: isize,
        len1: usize,
        len2: usize,
    },

    #[error("band {band} is narrower than the length difference {diff}")]
    BandTooNarrow { band: usize, diff: usize },

    #[error("gravity vector vanishes at timestep {0}")]
    DegenerateGravity(usize),

    #[error("cannot fit bins on a degenerate range (min == max == {0})")]
    DegenerateRange(f64),

    #[error("layout has no accelerometer triple for sensor position `{0}`")]
    MissingSensor(String),

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("layout contains no accelerometer sensors")]
    NoSensors,

    #[error("window {0} carries no pseudo-labels")]
    NoPseudoLabels(usize),

    #[error("cannot split {n_w} samples into {n_segments} segments")]
    InvalidSegments { n_segments: usize, n_w: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least 2 subjects for leave-one-subject-out, got {0}")]
    TooFewSubjects(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<PimError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl PimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a human-readable location such as a fold or seed.
    pub fn context(self, context: impl Into<String>) -> Self {
        PimError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, PimError>;
