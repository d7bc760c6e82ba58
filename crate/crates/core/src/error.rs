use std::path::PathBuf;

use thiserror::Error;

/// Every failure the audit engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in video `{video_id}` at frame {frame}")]
    NonFiniteValue { video_id: String, frame: usize },

    #[error("duplicate video id `{0}`")]
    DuplicateVideoId(String),

    #[error("invalid metadata for video `{video_id}`: {reason}")]
    InvalidMetadata { video_id: String, reason: String },

    #[error("predictor head shape chain broken: {0}")]
    ShapeChainBroken(String),

    #[error("non-finite weight in predictor head layer {layer}")]
    NonFiniteWeight { layer: usize },

    #[error("insufficient videos: need at least {needed}, found {found}")]
    InsufficientVideos { needed: usize, found: usize },

    #[error("training loss became non-finite at epoch {epoch}; try lowering the learning rate")]
    NonFiniteLoss { epoch: usize },

    #[error("score list is empty: {0}")]
    EmptyScoreList(&'static str),

    #[error("bootstrap resample {index} had a single class after {attempts} redraws")]
    DegenerateResample { index: usize, attempts: usize },

    #[error("reference set is empty")]
    EmptyReference,

    #[error("P_max table is empty")]
    EmptyTable,

    #[error("similarity spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("all videos were filtered out (min_frames = {min_frames})")]
    AllVideosFiltered { min_frames: usize },

    #[error("unknown video `{0}`")]
    UnknownVideo(String),

    #[error("frame {frame} out of range for video `{video_id}` with {num_frames} frames")]
    FrameOutOfRange {
        video_id: String,
        frame: usize,
        num_frames: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::SpecMismatch(_) => ErrorClass::Config,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::Config
            }
            Error::NonFiniteLoss { .. }
            | Error::DegenerateResample { .. }
            | Error::NonFiniteWeight { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    /// Name of the variant, stable across releases; used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoFailure",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::DuplicateVideoId(_) => "DuplicateVideoId",
            Error::InvalidMetadata { .. } => "InvalidMetadata",
            Error::ShapeChainBroken(_) => "ShapeChainBroken",
            Error::NonFiniteWeight { .. } => "NonFiniteWeight",
            Error::InsufficientVideos { .. } => "InsufficientVideos",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyScoreList(_) => "EmptyScoreList",
            Error::DegenerateResample { .. } => "DegenerateResample",
            Error::EmptyReference => "EmptyReference",
            Error::EmptyTable => "EmptyTable",
            Error::SpecMismatch(_) => "SpecMismatch",
            Error::AllVideosFiltered { .. } => "AllVideosFiltered",
            Error::UnknownVideo(_) => "UnknownVideo",
            Error::FrameOutOfRange { .. } => "FrameOutOfRange",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}
