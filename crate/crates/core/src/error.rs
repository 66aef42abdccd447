use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("disturbance of subsystem {subsystem} lies outside its set (wᵀQw = {value:.3e} > {level:.3e})")]
    DisturbanceOutOfSet {
        subsystem: usize,
        value: f64,
        level: f64,
    },

    #[error("tube synthesis infeasible: {0}")]
    TubeInfeasible(String),

    #[error("terminal synthesis infeasible: {0}")]
    TerminalInfeasible(String),

    #[error("empty tightened set: {0}")]
    EmptyTightenedSet(String),

    #[error("x(0) outside implicit safe set X_N")]
    OutsideSafeSet,

    #[error("certification program infeasible")]
    Infeasible,

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("consensus not converged after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e})")]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("communication error: {0}")]
    Communication(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("negative terminal level for subsystem {0}")]
    NegativeLevel(usize),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
