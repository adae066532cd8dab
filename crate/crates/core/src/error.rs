use thiserror::Error;

use crate::focp::FocpSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("function evaluation failed: {0}")]
    Evaluation(String),

    /// The line search could not make progress; carries the best iterate.
    #[error("minimizer stagnated after {iterations} iterations (f = {f}): {reason}")]
    Stagnation {
        x: Vec<f64>,
        f: f64,
        iterations: usize,
        reason: String,
    },

    #[error("state diverged during integration")]
    Divergence,

    /// The augmented-Lagrangian loop ran out of outer iterations before the
    /// terminal constraint was met.
    #[error("forward problem infeasible or ill-conditioned: terminal residual {residual:e}")]
    Infeasible {
        residual: f64,
        best: Box<FocpSolution>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>) -> Self {
        Error::Dimension(what.into())
    }
}
