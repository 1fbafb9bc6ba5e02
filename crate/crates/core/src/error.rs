use thiserror::Error;

/// Errors raised by the risk-measure routines.
///
/// The variants split into two families: [`Error::Invalid`] for inputs that
/// violate a model invariant, and everything else for numerical failures
/// discovered while computing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e}): {hint}")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        hint: String,
    },

    #[error("iteration diverging after {iterations} iterations: {hint}")]
    Divergence { iterations: usize, hint: String },

    #[error("quadratic coefficient exceeds 1/gamma; risk measure infinite (lambda = {lambda})")]
    Unbounded { lambda: f64 },

    #[error("FOC solution leaves quantile space; reduce gamma or use direct solver (first violation at grid index {index})")]
    NotMonotone { index: usize },

    #[error("priors have essentially disjoint support (geometric-mean mass {mass:.3e})")]
    DisjointSupport { mass: f64 },

    #[error("{0}")]
    Numerical(String),

    #[error("risk mapping evaluation failed at {point}: {reason}")]
    Evaluation { point: String, reason: String },

    #[error("singular linear system: {0}")]
    Singular(String),
}

impl Error {
    /// True for errors caused by invalid inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::NotSpd(_) | Error::Dimension(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
