use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DsdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("unsupported function: {0}")]
    UnsupportedFunction(String),
    #[error("insufficient paths: need at least {required}, got {available}")]
    InsufficientPaths { required: usize, available: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("numerical blow-up at step {step}: {detail}")]
    NumericalBlowup { step: usize, detail: String },
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("contraction map did not converge after {iterations} iterations (last distance {last_distance:e})")]
    MapDivergence { iterations: usize, last_distance: f64 },
    #[error("continuation failed at alpha = {alpha}: step size fell below {min_delta}")]
    ContinuationFailure { alpha: f64, min_delta: f64 },
    #[error("CFL condition violated: need at least {required_steps} time steps (dt <= {max_dt:e})")]
    CflViolation { required_steps: usize, max_dt: f64 },
    #[error("domain too small: shifted point {point} outside [{lower}, {upper}]")]
    DomainTooSmall { point: f64, lower: f64, upper: f64 },
    #[error("invalid hamiltonian: {0}")]
    InvalidHamiltonian(String),
}

pub type Result<T> = std::result::Result<T, DsdeError>;
