use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the prediction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("duration chain sums to {got}, expected {expected}")]
    DurationSum { got: u32, expected: u32 },

    #[error("location chain has {locations} entries but duration chain has {durations}")]
    ChainLengthMismatch { locations: usize, durations: usize },

    #[error("cannot tile a {width}x{height} grid into {admins} rectangular admin regions")]
    InfeasibleTiling {
        width: usize,
        height: usize,
        admins: usize,
    },

    #[error("{path}:{line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("slot count mismatch: {context} declares T={found}, expected T={expected}")]
    SlotMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 3 for numerical
    /// failures, 2 for every input contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
