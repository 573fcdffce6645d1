//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by dynamics, landscape and tracking operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A control field contained a non-finite value.
    #[error("invalid control field: {0}")]
    InvalidField(String),

    /// An eigendecomposition or other numerical kernel failed to converge.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Operand dimensions do not match.
    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    /// An input violated a structural precondition (Hermiticity, unitarity,
    /// zero operators where nonzero is required, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An eigenvalue multiplicity list is inconsistent with the dimension.
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    /// Adaptive step-size control underflowed without making progress.
    #[error("optimization stalled: step size fell below {0:e}")]
    StalledOptimization(f64),

    /// The dipole correlation matrix G is too ill-conditioned for strict mode.
    #[error("singular G matrix: condition {0:e} exceeds cap {1:e}")]
    SingularGMatrix(f64, f64),

    /// The observable correlation matrix Gamma is too ill-conditioned for
    /// strict mode.
    #[error("singular Gamma matrix: condition {0:e} exceeds cap {1:e}")]
    SingularGamma(f64, f64),

    /// Scalar tracking hit a critical region where the gradient norm
    /// gamma(s) vanishes.
    #[error("near-critical singularity: gamma(s) = {0:e} below tolerance")]
    NearCriticalSingularity(f64),

    /// A POVM effect produced a Born probability below -1e-12.
    #[error("invalid POVM: {0}")]
    InvalidPovm(String),

    /// A measurement record cannot support reconstruction.
    #[error("invalid measurement record: {0}")]
    InvalidRecord(String),
}

pub type Result<T> = std::result::Result<T, Error>;
