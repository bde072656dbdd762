use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Where an error reported by [`Error::Parse`] occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte offset {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is rank deficient at column {column} (residual norm {norm:.3e})")]
    RankDeficient { column: usize, norm: f64 },

    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no capacity left orthogonal to memory{context}: requested rank {requested}, available {available}")]
    CapacityExhausted {
        requested: usize,
        available: usize,
        context: String,
    },

    #[error("only {found} singular values above threshold, rank {requested} requested; try a smaller rank")]
    InsufficientRank { requested: usize, found: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error from client {client}: {reason}")]
    Protocol { client: usize, reason: String },

    #[error("parse error at {location}: {reason}")]
    Parse { location: Location, reason: String },

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than
    /// by the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
