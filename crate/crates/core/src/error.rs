use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule has {episodes} episodes but at most {capacity} fit in the encoding")]
    TooManyEpisodes { episodes: usize, capacity: usize },

    #[error("unknown activity `{0}`")]
    UnknownActivity(String),

    #[error("unknown token index {0}")]
    UnknownToken(usize),

    #[error("invalid schedule {pid}: {reason}")]
    InvalidSchedule { pid: String, reason: String },

    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),

    #[error("schedule {0} does not start and end at home")]
    NonHomeBased(String),

    #[error("label schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("dataset needs at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("inconsistent model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    /// Stable short identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TooManyEpisodes { .. } => "too-many-episodes",
            Error::UnknownActivity(_) => "unknown-activity",
            Error::UnknownToken(_) => "unknown-token",
            Error::InvalidSchedule { .. } => "invalid-schedule",
            Error::MalformedEncoding(_) => "malformed-encoding",
            Error::NonHomeBased(_) => "non-home-based",
            Error::SchemaMismatch(_) => "schema-mismatch",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::Empty(_) => "empty-input",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::Shape(_) => "shape-mismatch",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::NonFinite(_) => "non-finite",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Checkpoint(_) => "checkpoint",
            Error::HashMismatch { .. } => "config-hash-mismatch",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Parse { .. } => "parse",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
