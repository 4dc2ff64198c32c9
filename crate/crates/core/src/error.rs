use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`; optimizer step rejected")]
    NonFiniteGradient(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("timestep {timestep} out of range for embedding table of size {max}")]
    TimestepOutOfRange { timestep: usize, max: usize },
    #[error("batch assembled for {batch} but model variant is {model}")]
    VariantMismatch { batch: String, model: String },
    #[error("empty history")]
    EmptyHistory,
    #[error("invalid history: {0}")]
    History(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every position of the batch is masked")]
    AllMasked,
    #[error("loss diverged (non-finite) at step {0}")]
    Diverged(usize),
    #[error("{path}: line {line}, field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("environment/model mismatch: {0}")]
    EnvMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
