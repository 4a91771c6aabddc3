use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { op: String, node: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown function tag `{0}`")]
    UnknownFunction(String),

    #[error("{0}")]
    Config(String),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("non-deterministic objective: two identical evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by NaN/Inf appearing during a computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonDeterministic { .. })
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::MalformedRecord { .. }
                | Error::Data(_)
                | Error::CorruptCheckpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::Incompatible(_)
                | Error::Json(_)
        )
    }
}
