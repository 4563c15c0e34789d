use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sinkhorn did not converge: marginal violation {violation:e} after {iterations} iterations")]
    SinkhornNotConverged { violation: f64, iterations: usize },
    #[error("transport simplex exceeded {0} pivots")]
    SimplexIterationLimit(usize),
    #[error("fixed point not reached after {iterations} iterations (residual {residual:e})")]
    FixedPointNotConverged { iterations: usize, residual: f64 },
    #[error("stale tape: recorded at parameter version {recorded}, parameters now at {current}")]
    StaleTape { recorded: u64, current: u64 },
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch or replay buffer")]
    EmptyBatch,
    #[error("training observer failed: {0}")]
    Observer(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, Error>;
