use thiserror::Error;

/// Errors raised by the torus engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension too large: {elements} elements exceeds the cap of {cap}")]
    DimensionTooLarge { elements: u128, cap: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("aliasing: {0}")]
    Aliasing(String),

    #[error("stencil error: {0}")]
    Stencil(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("index {index} out of range (expected < {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("constraint mismatch: {rows} constraint rows for {unknowns} unknowns (expected {expected})")]
    ConstraintMismatch {
        rows: usize,
        unknowns: usize,
        expected: usize,
    },

    #[error("bordered tangent system is singular at p = {0}")]
    FoldHandling(f64),

    #[error("branch stalled at p = {p}: {reason}")]
    BranchStall { p: f64, reason: String },

    #[error("Newton iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("step rejected: {0}")]
    StepRejected(String),

    #[error("not a Neimark-Sacker point: {0}")]
    NotAnNsPoint(String),

    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),

    #[error("time integration blew up at t = {0}")]
    Blowup(f64),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
