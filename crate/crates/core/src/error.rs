use thiserror::Error;

/// Errors raised by the solvers and the experiment harness.
///
/// The variants fall into three families that the CLI maps onto distinct exit
/// codes: configuration problems, numerical failures and violated hypotheses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported dimension {dim} for {what}")]
    UnsupportedDimension { dim: usize, what: &'static str },

    #[error("time step {dt} exceeds the admissible step {admissible}")]
    Cfl { dt: f64, admissible: f64 },

    #[error(
        "penalized cell problem did not converge after {periods} periods (residual {residual:e})"
    )]
    NotConverged { periods: usize, residual: f64 },

    #[error("discretization failure: {0}")]
    Discretization(String),

    #[error("macro box too small: margin {margin} < required {required} (use a box side of at least {required_side})")]
    Margin {
        margin: f64,
        required: f64,
        required_side: f64,
    },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Exit-status family: 2 for configuration errors, 3 for numeric
    /// failures, 4 for hypothesis violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidParameter { .. }
            | Error::UnsupportedDimension { .. } => 2,
            Error::Margin { .. } => 2,
            Error::Hypothesis(_) => 4,
            Error::Io(_) | Error::Json(_) => 3,
            Error::Cfl { .. } | Error::NotConverged { .. } | Error::Discretization(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
