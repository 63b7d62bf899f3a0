use thiserror::Error;

/// Errors raised by the simulator, the oracle, and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("positive demand ({demand}) served by a zero allocation")]
    ZeroAllocation { demand: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("enumeration needs {profiles} joint profiles, cap is {cap}")]
    EnumerationCap { profiles: u128, cap: u128 },

    #[error("empty trajectory batch")]
    EmptyBatch,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("best-response dynamics did not settle within {0} improvement steps")]
    MaxIterations(usize),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
