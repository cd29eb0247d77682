use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("capacity error: dimension {n} exceeds the dense budget of {limit}")]
    Capacity { n: usize, limit: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular Lyapunov spectrum: eigenvalues {lhs} and {rhs} sum to (nearly) zero")]
    SingularSpectrum { lhs: String, rhs: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e}): {what}")]
    NonConvergence { what: String, iterations: usize, residual: f64 },

    #[error("order selection: {reason}; nearest admissible order is {suggestion}")]
    OrderSelection { reason: String, suggestion: usize },

    #[error("step-size error: {0}")]
    StepSize(String),

    #[error("certificate failed: {0}")]
    Certificate(String),

    #[error("accuracy error: {0}")]
    Accuracy(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("awaiting external solution: request written to {0}")]
    AwaitingExternal(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Capacity { .. } | Error::StepSize(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::OrderSelection { .. } => 3,
            Error::NonConvergence { .. }
            | Error::Numerical(_)
            | Error::SingularSpectrum { .. }
            | Error::AwaitingExternal(_) => 4,
            _ => 5,
        }
    }
}
