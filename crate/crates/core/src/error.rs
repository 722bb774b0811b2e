use thiserror::Error;

/// Errors surfaced by the learning and inference operations.
#[derive(Debug, Error)]
pub enum LqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular design: regressor matrix has rank {rank}, need {needed}")]
    SingularDesign { rank: usize, needed: usize },

    #[error("ill-conditioned linear system in {context}: condition number {cond:.3e}")]
    IllConditioned { context: String, cond: f64 },

    #[error("policy diverged at iteration {iteration}{}", replica.map(|b| format!(" (bootstrap replica {b})")).unwrap_or_default())]
    Divergence {
        iteration: usize,
        replica: Option<usize>,
    },

    #[error("line search failed to satisfy the descent condition after {halvings} halvings at iteration {iteration}")]
    StepFailure { iteration: usize, halvings: usize },

    #[error("need at least 2 bootstrap replicas, have {0}")]
    InsufficientReplicas(usize),

    #[error("{dropped} of {total} bootstrap replicas diverged (more than {max_frac:.0}% allowed)")]
    ReplicaLoss {
        dropped: usize,
        total: usize,
        max_frac: f64,
    },

    #[error("empty sample passed to {0}")]
    EmptySample(&'static str),

    #[error("system spec file error: {0}")]
    SpecFile(String),
}

pub type Result<T> = std::result::Result<T, LqError>;
