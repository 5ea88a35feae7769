use thiserror::Error;

/// Errors raised by the estimation, bootstrap, and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("empty vector")]
    EmptyVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("divergence: non-finite or unbounded objective at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("all coordinates are unpenalized")]
    NoPenalizedCoordinates,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("N must equal n·k (N = {rows}, k = {k})")]
    NotDivisible { rows: usize, k: usize },

    #[error(
        "{available} worker gradients cannot fill {folds} folds; reduce the number of folds"
    )]
    TooFewWorkerGradients { available: usize, folds: usize },

    #[error("validity region violated: {0}")]
    InvalidRegime(String),

    #[error("negative second moment {value} at coordinate {index}")]
    NegativeMoment { index: usize, value: f64 },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("weighted surrogate solve failed with c = {c}: {source}")]
    HeteroSolve {
        c: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
