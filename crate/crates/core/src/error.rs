use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A pointwise quantity left its admissible set (simplex, positivity, ranges).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("entropy-variable inversion failed after {iterations} iterations (residual {residual:e})")]
    InversionFailed { iterations: usize, residual: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An iterative solver hit its iteration cap. `trace` holds the residual history.
    #[error("{solver} did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("eps = {eps:e}: {source}")]
    Sweep {
        eps: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
