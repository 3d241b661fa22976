use std::fmt;

use thiserror::Error;

/// A single violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigViolation {
    /// Motion-frame segments cover more raw frames than the buffer holds.
    ScheduleOverrun { covered: usize, available: usize },
    /// A dimension that must be strictly positive is zero.
    NonPositiveDim { field: &'static str },
    /// Any other inconsistent value (e.g. a rate outside [0, 1]).
    Invalid { field: &'static str, reason: String },
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ScheduleOverrun { covered, available } => write!(
                f,
                "ScheduleOverrun: segments cover {covered} raw frames but only {available} motion frames are available"
            ),
            Self::NonPositiveDim { field } => write!(f, "NonPositiveDim: `{field}` must be > 0"),
            Self::Invalid { field, reason } => write!(f, "Invalid `{field}`: {reason}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<ConfigViolation>),

    #[error("segment schedule overruns motion buffer: max index {max_index} >= {available}")]
    ScheduleOverrun { max_index: usize, available: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("reference feature cache has no entry for block `{0}`")]
    MissingCacheEntry(String),

    #[error("unknown condition tag `{0}`")]
    UnknownConditionTag(String),

    #[error("audio track is empty")]
    EmptyAudio,

    #[error("unsupported sample rate {got} Hz (extractor expects {expected} Hz)")]
    UnsupportedSampleRate { got: u32, expected: u32 },

    #[error("need at least {min} frames, got {got}")]
    TooFewFrames { min: usize, got: usize },

    #[error("frame count mismatch: generated {generated}, ground truth {ground_truth}")]
    FrameCountMismatch { generated: usize, ground_truth: usize },

    #[error("timestep {t} out of range [0, {steps})")]
    TOutOfRange { t: usize, steps: usize },

    #[error("non-finite training loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::ScheduleOverrun { .. } => "ScheduleOverrun",
            Self::ShapeMismatch { .. } => "ShapeMismatch",
            Self::MissingCacheEntry(_) => "MissingCacheEntry",
            Self::UnknownConditionTag(_) => "UnknownConditionTag",
            Self::EmptyAudio => "EmptyAudio",
            Self::UnsupportedSampleRate { .. } => "UnsupportedSampleRate",
            Self::TooFewFrames { .. } => "TooFewFrames",
            Self::FrameCountMismatch { .. } => "FrameCountMismatch",
            Self::TOutOfRange { .. } => "TOutOfRange",
            Self::NonFiniteLoss { .. } => "NonFiniteLoss",
            Self::CheckpointMismatch(_) => "CheckpointMismatch",
            Self::MissingParam(_) => "MissingParam",
            Self::InvalidKeypoints(_) => "InvalidKeypoints",
            Self::Format(_) => "Format",
            Self::Tensor(_) => "Tensor",
            Self::Io(_) => "Io",
            Self::Json(_) => "Json",
            Self::Wav(_) => "Wav",
            Self::Image(_) => "Image",
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Self::ShapeMismatch {
            what: what.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
