use crate::lp::KktReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("state {state} out of range 0..={max}")]
    StateOutOfRange { state: usize, max: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("interior-point solver hit the iteration limit ({iterations}); residuals: {report}")]
    IterationLimit { iterations: usize, report: KktReport },

    #[error("numerical failure in solver: {0}")]
    Numerical(String),

    #[error("iterate diverged at iteration {iteration}: ||y||_inf = {norm:e}")]
    Diverged { iteration: usize, norm: f64 },

    #[error("problem too large for exact dynamic programming: {0}")]
    SizeLimit(String),

    #[error("budget {name}*N = {value} is not an integer")]
    NonIntegerBudget { name: &'static str, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParams { field, reason: reason.into() }
    }
}
