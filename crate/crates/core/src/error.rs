use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("{what} is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { what: &'static str, min_eigenvalue: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A state entry overflowed or became NaN. `step` is the index of the
    /// time step that produced it.
    #[error("non-finite state at step {step} ({context})")]
    NonFiniteState { step: usize, context: &'static str },

    #[error("too few particles: need at least {needed}, got {got}")]
    TooFewParticles { needed: usize, got: usize },

    #[error("rank collapse while orthonormalizing column {column} (residual {residual:e})")]
    RankCollapse { column: usize, residual: f64 },

    #[error("all columns dropped during orthonormalization")]
    EmptyBasis,

    #[error("requested rank {rank} exceeds available width {width}")]
    RankExceedsWidth { rank: usize, width: usize },

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("assembly failure: {0}")]
    AssemblyFailure(String),

    #[error("observation square {0} intersects no element")]
    EmptySquare(usize),

    #[error("mismatched ensembles: {0}")]
    MismatchedEnsembles(String),

    #[error("log-log fit needs positive data: {0}")]
    NonPositiveData(String),

    #[error("operation requires a model without mass matrix: {0}")]
    MassMatrixUnsupported(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stamps the step index on a divergence error raised inside a single step.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFiniteState { context, .. } => Error::NonFiniteState { step, context },
            e => e,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
