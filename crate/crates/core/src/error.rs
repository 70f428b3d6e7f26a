use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("activation tape is stale: network was modified or is not the one that produced it")]
    StaleTape,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("degenerate tail draw u = {0}; uniform noise must lie strictly inside (0, 1)")]
    DegenerateNoise(f64),

    #[error("insufficient data: need {need} transitions, buffer holds {have}")]
    InsufficientData { need: usize, have: usize },

    #[error("replay index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("action {action} outside the action set of size {n_actions}")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
