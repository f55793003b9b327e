use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coincident anchors: B-C separation {separation:e} bohr is below {cutoff:e}")]
    CoincidentAnchors { separation: f64, cutoff: f64 },

    #[error("trajectory diverged at step {step}: {detail}")]
    TrajectoryDiverged { step: u64, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient data for {what}: need at least {need}, got {got}")]
    InsufficientData {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("grid does not contain the origin")]
    GridMissingZero,

    #[error("grid is not symmetric about the origin")]
    AsymmetricGrid,

    #[error("matrix is not symmetric (max deviation {0:e})")]
    NotSymmetric(f64),

    #[error("not positive semidefinite: eigenvalue {0:e}")]
    NotPositiveSemidefinite(f64),

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("retained states carry thermal weight {retained}, need at least {required}; increase the state count")]
    InsufficientStates { retained: f64, required: f64 },

    #[error("run is not quasi-stationary: {0}")]
    NotStationary(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
