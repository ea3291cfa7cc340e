use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: need d >= 2")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),

    #[error("operation not supported for ensemble kind {kind}: {reason}")]
    UnsupportedForKind { kind: String, reason: String },

    #[error("wrong ensemble kind: expected {expected}, found {found}")]
    WrongKind { expected: String, found: String },

    #[error("eigenvalue law has no finite mean; the average Hamiltonian does not exist")]
    NoAverageHamiltonian,

    #[error("dynamical map is singular on a non-isolated time span [{start}, {end}]")]
    ExtractionFailure { start: f64, end: f64 },

    #[error("generator violates trace preservation (residual {0:.3e})")]
    InconsistentGenerator(f64),

    #[error("initial purity {purity} outside [1/d, 1] for d = {dim}")]
    InvalidPurity { purity: f64, dim: usize },

    #[error("cannot propagate through singular time {0} without an exact map bridge")]
    SingularPropagation(f64),

    #[error("time grids differ")]
    GridMismatch,

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("integrator failure at t = {t}: {reason}")]
    Integrator { t: f64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
