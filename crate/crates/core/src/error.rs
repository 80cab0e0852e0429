use thiserror::Error;

pub type Result<T> = std::result::Result<T, AjdError>;

#[derive(Debug, Error)]
pub enum AjdError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix {index} is not symmetric (max asymmetry {asymmetry:e} exceeds tolerance {tolerance:e})")]
    Asymmetric {
        index: usize,
        asymmetry: f64,
        tolerance: f64,
    },

    /// A diagonal entry of a transformed matrix is not strictly positive.
    #[error("evaluated outside domain: matrix {matrix} has diagonal entry D[{entry}][{entry}] = {value:e}")]
    OutsideDomain {
        matrix: usize,
        entry: usize,
        value: f64,
    },

    #[error("matrices not positive definite: {indices:?}")]
    NotPositiveDefinite { indices: Vec<usize> },

    #[error("mean matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NonPositiveMean { eigenvalue: f64 },

    #[error("diagonalizer is singular")]
    SingularDiagonalizer,

    #[error("malformed matrix-set file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
