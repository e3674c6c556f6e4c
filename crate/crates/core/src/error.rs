use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A query row attended to no keys (running sum is zero) and was finalized.
    #[error("empty attention: query row {row} of batch {batch}, head {head} has no accumulated keys")]
    EmptyAttention {
        batch: usize,
        head: usize,
        row: usize,
    },

    /// A mesh or workload does not satisfy the divisibility constraints of a plan.
    #[error("planning error: {0}")]
    Planning(String),

    /// Unknown buffer, out-of-range region, or a non-symmetric remote access.
    #[error("buffer error: {0}")]
    Buffer(String),

    /// Every live rank is parked in a barrier that can never be satisfied.
    #[error("deadlock: barrier over {group:?} is missing ranks {missing:?}")]
    Deadlock {
        group: Vec<usize>,
        missing: Vec<usize>,
    },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
