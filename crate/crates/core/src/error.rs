use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate utility: {0}")]
    DegenerateUtility(String),

    #[error("invalid utility: {0}")]
    InvalidUtility(String),

    /// A price (or other strictly positive input) was zero, negative or non-finite.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("elasticity undefined: hicksian demand for good {good} is zero")]
    UndefinedElasticity { good: usize },

    #[error("theoretical step size infeasible: {0}")]
    Infeasible(String),

    #[error("inconsistent oracle: phi* = {phi_star} exceeds the minimum recorded potential {min_phi}")]
    InconsistentOracle { phi_star: f64, min_phi: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid market: {}", .0.join("; "))]
    InvalidMarket(Vec<String>),
}

/// Checks that every entry of `p` is finite and strictly positive.
pub(crate) fn check_positive(p: &[f64], what: &str) -> Result<()> {
    for (j, &pj) in p.iter().enumerate() {
        if !(pj.is_finite() && pj > 0.0) {
            return Err(Error::Domain(format!("{what}[{j}] = {pj} is not strictly positive")));
        }
    }
    Ok(())
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
