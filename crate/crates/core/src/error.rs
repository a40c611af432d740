use std::path::PathBuf;

use crate::geometry::Pose;

pub type Result<T, E = SlamError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SlamError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid depth {depth}: must be positive")]
    InvalidDepth { depth: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("frame has no valid depth pixels; nothing to initialize")]
    EmptyInitialization,

    #[error("gaussian map is empty")]
    EmptyMap,

    #[error("render output carries no contributor cache")]
    MissingContributorCache,

    #[error("frame is untrackable: no pixel passes the visibility gate")]
    UntrackableFrame,

    #[error("tracking lost (loss diverged); best loss {best_loss}")]
    TrackingLost { best_pose: Box<Pose>, best_loss: f64 },

    #[error("keyframe window is empty")]
    EmptyWindow,

    #[error("no valid samples for parallax estimation")]
    DegenerateParallax,

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("insufficient trajectory overlap: {matched} matched poses, need at least {required}")]
    InsufficientOverlap { matched: usize, required: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl SlamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlamError::Io {
            path: path.into(),
            source,
        }
    }
}
