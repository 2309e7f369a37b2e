//! Error types shared across the solver.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("singular tridiagonal system: pivot {pivot:.3e} at row {row}")]
    SingularSystem { row: usize, pivot: f64 },
    #[error("target distribution leaves the domain: in-domain mass {mass:.6} < 0.999")]
    DomainCoverage { mass: f64 },
    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),
    #[error("invalid market parameters: {0}")]
    InvalidMarket(String),
    #[error("invalid cost specification: {0}")]
    InvalidCost(String),
    #[error("invalid penalty specification: {0}")]
    InvalidPenalty(String),
    #[error("initial wealth {x0} outside the domain [{x_min}, {x_max}]")]
    InitialOutsideDomain { x0: f64, x_min: f64, x_max: f64 },
    #[error("CFL violation: step {dt:.3e} exceeds stable {stable:.3e} and substepping is disabled")]
    CflViolation { dt: f64, stable: f64 },
    #[error("explicit scheme exceeded the substep cap ({substeps} > {cap})")]
    SubstepCap { substeps: usize, cap: usize },
    #[error("no admissible control candidate: box is incompatible with the feasibility cone")]
    EmptyControlSet,
    #[error("HJB backward step failed at time index {time_index}: {source}")]
    HjbStep {
        time_index: usize,
        source: Box<SolverError>,
    },
    #[error("Monte Carlo clamp fraction {fraction:.4} exceeds 0.01")]
    ExcessiveClamping { fraction: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;
