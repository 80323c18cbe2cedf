//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, training, trajectory analysis,
/// the defense pipeline, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("edge ({0}, {1}) is not in the graph")]
    MissingEdge(usize, usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("snapshot ring is empty; nothing to roll back to")]
    EmptySnapshotRing,

    #[error("trajectory error: {0}")]
    Trajectory(String),

    #[error("generator failed: {0}")]
    Generator(String),

    #[error("detector error: {0}")]
    Detector(String),

    #[error("rectification error: {0}")]
    Rectify(String),

    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("incompatible detector set: expected {expected}, found {found}")]
    DetectorMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
