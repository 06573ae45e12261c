//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's contract (bad shape, out-of-range
    /// index, inconsistent lengths).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Scene sampling could not place the requested objects without overlap.
    #[error("object placement infeasible after {attempts} attempts")]
    PlacementInfeasible { attempts: usize },

    /// Asked to sample more frames than the trajectory provides.
    #[error("cannot sample {requested} frames from {available}")]
    InsufficientFrames { available: usize, requested: usize },

    /// A serialized artifact is malformed. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error in {file} at byte {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint does not match what the caller needs (wrong kind, wrong
    /// config hash, wrong parameter table).
    #[error("checkpoint mismatch ({what}): expected {expected}, found {found}")]
    CheckpointMismatch {
        what: String,
        expected: String,
        found: String,
    },

    /// Training hit a non-finite loss. Carries enough context to reproduce
    /// the failing step.
    #[error("training diverged at step {step} (lr {lr}, batch {batch:?}): loss {loss}")]
    TrainDiverged {
        step: usize,
        lr: f64,
        batch: Vec<u64>,
        loss: f64,
    },

    /// A parameter that was supposed to stay frozen changed during training.
    #[error("frozen parameter '{name}' changed (max abs delta {delta})")]
    FrozenParamChanged { name: String, delta: f64 },

    #[error("dataset is empty")]
    EmptyDataset,
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(file: impl AsRef<std::path::Path>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            file: file.as_ref().display().to_string(),
            offset,
            reason: reason.into(),
        }
    }
}
