use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("image too small: {width}x{height}, need at least {min} per side")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("patch {origin:?}+{size} exceeds image {width}x{height}")]
    PatchOutOfBounds {
        origin: (usize, usize),
        size: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("timestep {0} is not valid here")]
    InvalidTimestep(usize),

    #[error("timestep {0} is not on the DDIM ladder")]
    NotOnLadder(usize),

    #[error("no holdout camera found after {0} attempts")]
    HoldoutExhausted(usize),

    #[error("bad binary blob: {0}")]
    BadBlob(String),

    #[error("run failed: {0}")]
    RunFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by bad user input (config, missing files),
    /// as opposed to failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Read { .. } | Error::Json(_) | Error::InvalidParameter(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
