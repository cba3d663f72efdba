use thiserror::Error;

/// Errors raised by the model, solvers, estimators and I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("beliefs undefined at state {state}: zero total mass")]
    UndefinedBelief { state: usize },

    #[error("equilibrium iteration did not converge after {iterations} iterations (last residual {last_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        trace: Vec<f64>,
    },

    #[error("mass update is not a contraction: {0}")]
    NonContraction(String),

    #[error("no admissible root: {0}")]
    Infeasible(String),

    #[error("solution is stale: {0}")]
    StaleSolution(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("assumption {assumption} violated: {detail}")]
    AssumptionViolated { assumption: &'static str, detail: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures of a numerical procedure (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NonContraction(_)
                | Error::Infeasible(_)
                | Error::UndefinedBelief { .. }
                | Error::RankDeficient(_)
                | Error::AssumptionViolated { .. }
                | Error::StaleSolution(_)
        )
    }

    /// True for file-system and parse failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. } | Error::InvalidPanel(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
