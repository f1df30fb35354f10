use thiserror::Error;

/// Errors raised by the toolkit's solvers, builders and learners.
#[derive(Debug, Error)]
pub enum Error {
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergent { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid reward table: {0}")]
    InvalidReward(String),

    #[error("beta {0} is outside [0, 1]")]
    BetaOutOfRange(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("reward table is identically zero")]
    ZeroReward,

    #[error("demonstrator assigns zero probability to action {action} in state {state}")]
    UnsupportedAction { state: usize, action: usize },

    #[error("need at least {needed} recent scores, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("operation requires a reward-phasing continuum, got {0}")]
    WrongMode(String),

    #[error("start policy has zero probability for action {action} in state {state}")]
    DegeneratePolicy { state: usize, action: usize },

    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("monotonicity check requires an exact reward_v1 curve: {0}")]
    WrongCurveKind(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
