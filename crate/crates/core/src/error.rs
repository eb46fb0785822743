use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration or hyperparameter.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The object is not in the state the operation requires.
    #[error("invalid state: {0}")]
    State(String),

    /// A structural constraint (such as window retention) would be broken.
    #[error("constraint violation: {0}")]
    Constraint(String),

    /// The requested budget cannot be met.
    #[error("infeasible budget: {0}")]
    Infeasible(String),

    /// Enumeration would exceed the configured cap.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// Malformed trace file.
    #[error("trace format error: {0}")]
    Format(String),

    /// An audited invariant failed during a run.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for configuration and feasibility problems,
    /// 2 for I/O and file format problems, 3 for invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => 2,
            Error::Invariant(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        {
            // NaN comparisons evaluate to false and fail the check
            let ok: bool = $cond;
            if !ok {
                return Err($crate::error::Error::$variant(format!($($arg)+)));
            }
        }
    };
}

pub(crate) use ensure;
