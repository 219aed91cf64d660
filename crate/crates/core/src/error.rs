//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Power iteration failed to converge and the one-step ergodicity
    /// coefficient is 1: the chain does not contract in a single step and
    /// showed no sign of mixing within the iteration budget.
    #[error(
        "chain appears non-ergodic: power iteration did not reach tolerance {tolerance:e} \
         after {iterations} iterations (one-step ergodicity coefficient {coefficient})"
    )]
    NonErgodic {
        iterations: usize,
        tolerance: f64,
        coefficient: f64,
    },

    #[error("linear solve failed: {0}")]
    SingularSystem(String),

    /// `find_optimal_policy` refuses MDPs above its size limit; regret
    /// against J* must then be disabled for the run.
    #[error(
        "MDP too large for exact optimal-policy search ({size} state-action pairs > limit \
         {limit}); disable regret-vs-J* reporting for this environment"
    )]
    SizeLimit { size: usize, limit: usize },

    /// An estimator backend failed inside the phase loop.
    #[error("estimation failed in phase {phase}: {source}")]
    PhaseFailure {
        phase: usize,
        #[source]
        source: Box<CoreError>,
    },

    /// A strict-mode in-loop assertion fired.
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Wraps an error with the phase index it occurred in.
    pub fn in_phase(self, phase: usize) -> CoreError {
        CoreError::PhaseFailure {
            phase,
            source: Box::new(self),
        }
    }
}
