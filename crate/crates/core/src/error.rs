//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sample {id} contains non-finite values")]
    Data { id: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Two embeddings coincide, which makes the pairwise energy singular.
    #[error("rows {i} and {j} are identical; hyperspherical energy is singular")]
    Singularity { i: usize, j: usize },

    #[error("label {0} is present in the test split but absent from the train split")]
    LabelCoverage(usize),

    #[error(
        "training diverged at batch {batch}: loss {loss} (l_cl {l_cl}, l_task {l_task})"
    )]
    Divergence {
        batch: usize,
        loss: f64,
        l_cl: f64,
        l_task: f64,
    },

    #[error("frozen network rejects parameter updates")]
    Frozen,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code for the CLI, grouped by error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Load { .. } | Error::Io(_) => 3,
            Error::Schema(_) | Error::Data { .. } | Error::Dimension(_) => 4,
            Error::Parameter(_) | Error::Capacity(_) | Error::LabelCoverage(_) => 5,
            Error::Singularity { .. } => 6,
            Error::Divergence { .. } | Error::Frozen => 7,
            Error::Checkpoint(_) | Error::Version { .. } | Error::State(_) => 8,
        }
    }
}
