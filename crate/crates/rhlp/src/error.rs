use thiserror::Error;

/// Errors reported by the estimators in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Input sequences are inconsistent or contain non-finite values.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Fewer observations than the model needs (`n < K * (p + 2)`).
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    /// A mixture component lost essentially all responsibility mass.
    #[error("component {component} has degenerate responsibility mass")]
    DegenerateComponent { component: usize },

    /// Every random start failed repeatedly with degenerate components.
    #[error("all {starts} starts failed after repeated restarts")]
    AllStartsFailed { starts: usize },

    /// Every cell of a model-selection grid was skipped.
    #[error("no feasible (K, p) cell in the selection grid")]
    EmptyGrid,

    /// Two sequences that must have equal length do not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}
