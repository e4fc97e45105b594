use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty gradient set: every column has zero norm")]
    EmptyGradientSet,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),

    #[error("infeasible budget: {budget} exceeds {available} available samples")]
    Infeasible { budget: usize, available: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradients for gradient-based strategy `{0}`")]
    MissingGradients(&'static str),

    #[error("combinatorial guard exceeded: C({n}, {k}) = {count} > {limit}")]
    TooManySubsets { n: usize, k: usize, count: u128, limit: u128 },

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("client `{client}` failed: {reason}")]
    ClientFailed { client: String, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
