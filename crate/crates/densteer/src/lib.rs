//! densteer: steering a portfolio wealth density to a prescribed terminal
//! distribution.
//!
//! The solver maximizes the dual objective of a stochastic mass-transport
//! problem: a backward implicit HJB sweep with pointwise control maximization
//! produces the dual potential and the optimal drift/diffusion fields, a
//! forward Fokker-Planck pass produces the realized wealth density, and a
//! limited-memory quasi-Newton loop updates the terminal potential from the
//! dual gradient. Cash saving (unsaturated drift) and cash input (drift
//! beyond the self-financing cone) are quantified alongside, and an
//! Euler-Maruyama path simulator cross-validates the PDE densities.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fokker_planck;
pub mod grid;
pub mod hamiltonian;
pub mod hjb;
pub mod model;
pub mod montecarlo;
pub mod optimizer;
pub mod parallel;

pub use config::ExperimentConfig;
pub use error::{Result, SolverError};
pub use grid::Grid;
pub use hjb::{ControlField, DualPotential};
pub use model::{CostSpec, MarketParams, PenaltySpec, TargetDistribution};
pub use optimizer::{optimize, Problem, SolveReport, SolveSettings};
