use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid filtration: {0}")]
    InvalidFiltration(String),

    #[error("degenerate frame at {point:?} (condition number {condition:.3e})")]
    DegenerateFrame { point: Vec<f64>, condition: f64 },

    #[error("point {point:?} lies outside the chart of radius {radius}")]
    OutsideChart { point: Vec<f64>, radius: f64 },

    #[error("index {index} out of range 1..={dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grading violation: |c[{i}][{j}][{k}]| = {value:.3e} exceeds tolerance")]
    GradingViolation {
        i: usize,
        j: usize,
        k: usize,
        value: f64,
    },

    #[error("trajectory left the chart at {point:?}")]
    ChartExit { point: Vec<f64> },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("Jacobi identity violated (residual {0:.3e})")]
    JacobiViolation(f64),

    #[error("unsupported nilpotency depth {0}")]
    UnsupportedDepth(usize),

    #[error("group elements belong to different algebras")]
    AlgebraMismatch,

    #[error("field {0} is not generated by horizontal brackets")]
    NotGenerated(usize),

    #[error("map is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("map undefined along the sampled curve at parameter {0}")]
    UndefinedAlongCurve(f64),

    #[error("product formula mismatch: direct fit and product differ by {0:.3e}")]
    ProductMismatch(f64),

    #[error("non-injective map detected near {0:?}")]
    NonInjectiveDetected(Vec<f64>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
