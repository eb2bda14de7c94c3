use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("outside the domain of validity: {0}")]
    Domain(String),
    #[error("certified bound violated at u = {at}")]
    BoundViolation { at: f64 },
    #[error("chain diverged: non-finite energy after {step} steps")]
    Diverged { step: usize },
    #[error("step-size auto-tuning failed: acceptance rate {rate:.3}")]
    AutoTune { rate: f64 },
    #[error("one-dimensional conditional sampler exceeded {tries} rejections")]
    RejectionCap { tries: usize },
    #[error("resolution too coarse: {0}")]
    Resolution(String),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("estimate unresolved: {0}")]
    Unresolved(String),
    #[error("identity check failed: {0}")]
    Residual(String),
}

pub type Result<T> = std::result::Result<T, Error>;
