use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the interval an operation is defined on.
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A schedule could not be constructed from the given parameters.
    #[error("invalid schedule: {0}")]
    Schedule(String),

    /// Domain error of a special function (log of a non-positive argument and similar).
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "search for {what} did not converge within {iters} iterations (residual {residual:e})"
    )]
    Convergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    /// A non-finite value appeared at the given reverse step.
    #[error("non-finite value at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
