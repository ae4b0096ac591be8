use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Local gradient descent produced a non-finite parameter. Usually means
    /// the learning rate is too large for the data scale.
    #[error("divergence at local iteration {iteration}: parameter became non-finite (learning rate too large?)")]
    Divergence { iteration: usize },

    /// A [`Divergence`](Error::Divergence) surfaced inside an experiment,
    /// annotated with where it happened.
    #[error("divergence in round {round} at device {device} (local iteration {iteration})")]
    ExperimentDiverged {
        round: usize,
        device: usize,
        iteration: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("normal equations are rank-deficient; add ridge regularization (lambda > 0)")]
    RankDeficient,

    /// A convergence-bound precondition does not hold; `condition` names
    /// the failed one.
    #[error("bound conditions not satisfied: {condition}")]
    NotApplicable { condition: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
