use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LqError {
    #[error("{file}:{line}:{column}: {msg}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost matrix {0} is not symmetric")]
    NonSymmetricCostMatrix(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("assumption check failed: {0} (rerun with --allow-unverified to use the a-posteriori route)")]
    AssumptionFailure(String),
    #[error("unsupported initial law: {0}")]
    UnsupportedInitialLaw(String),
    #[error("S is singular or not positive definite at t = {t}")]
    SingularS { t: f64 },
    #[error("S-hat is singular or not positive definite at t = {t}")]
    SingularShat { t: f64 },
    #[error("Riccati solution blew up at t = {t}")]
    BlowUp { t: f64 },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("Newton iteration diverged: {0}")]
    NewtonDiverged(String),
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("integrability violation: {0}")]
    IntegrabilityViolation(String),
    #[error("time {t} outside the feedback-law grid")]
    OutOfGrid { t: f64 },
    #[error("particle system unstable at step {step} (t = {t}); try a smaller dt")]
    Unstable { step: usize, t: f64 },
    #[error("backward solution missing")]
    BackwardSolutionMissing,
}

impl LqError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            LqError::Parse { .. } | LqError::Io(_) => 1,
            LqError::DimensionMismatch(_)
            | LqError::NonSymmetricCostMatrix(_)
            | LqError::Invalid(_)
            | LqError::InvalidParams(_)
            | LqError::AssumptionFailure(_)
            | LqError::UnsupportedInitialLaw(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LqError>;
