use thiserror::Error;

/// Failure inside the raw quadrature kernel.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("integrand is not finite at x = {x}")]
    NonFinite { x: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("integral does not converge: {0}")]
    DivergentIntegral(String),
    #[error("weights sum to zero after reweighting")]
    DegenerateWeights,
    #[error("posterior is not absolutely continuous with respect to the base measure")]
    NotAbsolutelyContinuous,
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("views are infeasible: {0}")]
    Infeasible(String),
    #[error("root is not bracketed on [{lo}, {hi}]")]
    RootNotBracketed { lo: f64, hi: f64 },
    #[error("covariance block is singular: {0}")]
    SingularBlock(String),
    #[error("change of variables has a singular jacobian")]
    SingularJacobian,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<QuadError> for Error {
    fn from(e: QuadError) -> Self {
        Error::DivergentIntegral(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
