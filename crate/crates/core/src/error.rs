use thiserror::Error;

/// Errors raised across the toolkit. Variants name the failing contract rather
/// than the module, so callers can match on the cause.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("coefficient field must be strictly positive (min {min:e} at cell {cell})")]
    Coefficient { min: f64, cell: usize },

    #[error("target density invalid: {0}")]
    Target(String),

    #[error("Poisson right-hand side has nonzero mass {mass:e}")]
    Compatibility { mass: f64 },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    #[error("decay fit failed: {0}")]
    Fit(String),

    #[error("density dropped to {value:e} at cell {cell}, below floor {floor:e}")]
    PositivityLoss { value: f64, cell: usize, floor: f64 },

    #[error("mass mismatch: {found} vs expected {expected}")]
    MassMismatch { found: f64, expected: f64 },

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("graph is not strongly connected (V1 = {v1:?}, V2 = {v2:?})")]
    NotStronglyConnected { v1: Vec<usize>, v2: Vec<usize> },

    #[error("point is not in the interior of the simplex (min coordinate {min:e})")]
    NotInterior { min: f64 },

    #[error("variation {norm:e} exceeds the admissible step {bound:e}")]
    StepTooLarge { norm: f64, bound: f64 },

    #[error("infeasible control variation on walk step {step}: log argument {argument:e}")]
    InfeasibleVariation { step: usize, argument: f64 },

    #[error("rate synthesis failed: residual {residual:e}")]
    Synthesis { residual: f64 },

    #[error("time step {dt:e} too large: exit rate times dt is {product:e} (limit {limit})")]
    StepSize { dt: f64, product: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
