use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("softmax row {0} is fully masked: no valid attention target")]
    FullyMasked(usize),

    #[error("no supervised positions")]
    NoSupervisedPositions,

    #[error("label {label} out of range for vocabulary of size {vocab_size}")]
    LabelOutOfRange { label: i64, vocab_size: usize },

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("wrong paradigm: operation needs {expected}, model is {found}")]
    Paradigm {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no room for target: prompt uses {prompt_len} of {max_len} positions")]
    NoRoomForTarget { prompt_len: usize, max_len: usize },

    #[error("unresolved db_id '{db_id}' at example {index}")]
    UnresolvedDbId { db_id: String, index: usize },

    #[error("{}: malformed record {index}: {msg}", path.display())]
    Malformed {
        path: PathBuf,
        index: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training diverged at step {0}")]
    Diverged(usize),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Config(_) => 1,
            Error::Diverged(_) => 3,
            _ => 2,
        }
    }
}
