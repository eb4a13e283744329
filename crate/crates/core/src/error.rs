use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is rank deficient (singular values {singular_values:?})")]
    Rank { singular_values: Vec<f64> },

    #[error("non-finite value while evaluating {what} at {point:?}")]
    Evaluation { what: String, point: Vec<f64> },

    #[error("matching equations are not solvable here: annihilated residual {residual:?}")]
    InfeasibleMatching { residual: Vec<f64> },

    #[error("input map is square (m = n): the dissipation output has a trivial kernel")]
    NoKernel,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid construction: {0}")]
    Construction(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { what, expected, found });
    }
    Ok(())
}
