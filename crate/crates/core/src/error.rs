use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive entry {value} at ({row}, {col}) of atom {atom}")]
    NonPositiveEntry {
        atom: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("bad probability vector: {0}")]
    BadProbabilityVector(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid simplex point: {0}")]
    InvalidSimplexPoint(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what}: iteration budget of {budget} exceeded (gap {gap:e})")]
    IterationBudgetExceeded {
        what: &'static str,
        budget: usize,
        gap: f64,
    },
    #[error("unsupported dimension {0} (grids exist for d = 2 and d = 3)")]
    UnsupportedDimension(usize),
    #[error("power iteration did not converge after {iterations} iterations (change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("negative or non-finite weight encountered during {0}")]
    NegativeWeight(&'static str),
    #[error("condition violation: {0}")]
    ConditionViolation(String),
    #[error("tilt parameter s = {s} outside the working range [{lo}, {hi}]")]
    SOutOfRange { s: f64, lo: f64, hi: f64 },
    #[error("q = {q} outside the range of the derivative [{lo}, {hi}]")]
    QOutOfRange { q: f64, lo: f64, hi: f64 },
    #[error("derivative unstable: second cumulant {gamma2:e} below 1e-10")]
    DerivativeUnstable { gamma2: f64 },
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("interval too narrow: expected hit count {expected:.1} < 50")]
    IntervalTooNarrow { expected: f64 },
    #[error("overflow guard: {0}")]
    OverflowGuard(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
