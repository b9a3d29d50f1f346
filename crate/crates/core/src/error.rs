use std::io;

use thiserror::Error;

use crate::protocol::DecodeError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("class {0} has no observations")]
    EmptyClass(usize),
    #[error("detector has not been calibrated")]
    Uncalibrated,
    #[error("every inference request was rejected; no labeled pairs collected")]
    AllRejected,
    #[error("{0}")]
    Attack(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("protocol: {0}")]
    Decode(#[from] DecodeError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("stage `{stage}` failed for seed {seed}: {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
