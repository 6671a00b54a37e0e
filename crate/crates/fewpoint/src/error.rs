//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or point-set shapes; names both offenders.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition stated by an operation's contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input that is structurally valid but too small/empty to operate on.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Text parse failure with location.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An op without second-order support appeared in a graph being
    /// differentiated with `create_graph`.
    #[error("second-order differentiation is not supported for op `{op}`")]
    Capability { op: &'static str },

    /// Iterative solver exceeded its iteration cap.
    #[error("failed to converge: {0}")]
    Convergence(String),

    /// Checkpoint serialization problems (bad magic, unknown names, ...).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Config file problems.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }
}
