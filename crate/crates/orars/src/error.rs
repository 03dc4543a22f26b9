use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("utterance `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    InvalidConfig(String),

    #[error("rank {rank} has {have} samples, need {need} for the anchor set")]
    InsufficientRank { rank: usize, have: usize, need: usize },

    #[error("utterance `{0}` has no score")]
    Unscored(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;
