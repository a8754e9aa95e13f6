use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("coordinate ({x}, {y}) outside the open interval (-1, 1)")]
    OutOfDomain { x: f64, y: f64 },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("non-finite loss at iteration {iteration} (stage {stage}): {detail}")]
    NonFiniteLoss {
        iteration: usize,
        stage: u8,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}{}: {reason}", offset.map(|o| format!(" (byte {o})")).unwrap_or_default())]
    MalformedFile {
        path: PathBuf,
        offset: Option<u64>,
        reason: String,
    },
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, offset: Option<u64>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedFile { .. }
                | Error::DegenerateLandmarks(_)
                | Error::ShapeMismatch(_)
                | Error::ClassOutOfRange { .. }
                | Error::InvalidConfig(_)
        )
    }
}
