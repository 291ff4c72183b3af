use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("validation error: {field} {reason}")]
    Validation { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("device {0} unreachable (zero channel gain)")]
    DeviceUnreachable(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("policy audit failed: {constraint} violated by {slack:.3e}")]
    Audit { constraint: String, slack: f64 },

    #[error("exhaustive search capped at N = {cap}, scenario has N = {n}")]
    OracleCap { n: usize, cap: usize },

    #[error("invalid bracket: {0}")]
    Bracket(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(field: &str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
