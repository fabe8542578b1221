use std::path::PathBuf;

/// Errors raised by the optimizer, its solvers and the bundled objectives.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A loss evaluation returned NaN or an infinity.
    #[error("non-finite loss {value} at particle {particle}, vertex {vertex}, probe {probe}")]
    NonFiniteCost {
        particle: usize,
        vertex: usize,
        probe: usize,
        value: f64,
    },

    #[error("non-finite loss {0} at the current parameters")]
    NonFiniteLoss(f64),

    #[error("dimacs parse error on line {line}: {message}")]
    Dimacs { line: usize, message: String },

    #[error("idx parse error at byte {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
