use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("t = {t} lies outside [{a}, {b}]")]
    OutsideDomain { t: f64, a: f64, b: f64 },
    #[error("grid is not equidistant; the fast path requires an equidistant design")]
    NotEquidistant,
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error("invalid boundary conditions: {0}")]
    InvalidBoundary(String),
    #[error("characteristic roots are not distinct (separation {separation:e})")]
    RepeatedRoots { separation: f64 },
    #[error("characteristic roots cannot be split into {k} decaying and {k} growing modes")]
    UnbalancedRoots { k: usize },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("imaginary residual {imag:e} exceeds tolerance for value {value:e}")]
    ImaginaryResidual { value: f64, imag: f64 },
    #[error("exponent {exponent} exceeds the overflow guard of the explicit Green's function")]
    OverflowGuard { exponent: f64 },
    #[error("derivative order {mu} exceeds the maximum {max}")]
    OrderTooLarge { mu: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem size {size} exceeds the dense limit {limit}")]
    SizeGuard { size: usize, limit: usize },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
