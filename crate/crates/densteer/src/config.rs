//! TOML experiment configuration: parsing, validation, defaults and the
//! conversion into a solver [`Problem`].
//!
//! All quantities use the solver's units: the horizon is 1, wealth is in
//! currency units, and `K(t)` segments tile `[0, 1]`.

use crate::error::{Result, SolverError};
use crate::fokker_planck::{initial_density, FpSettings};
use crate::hjb::HjbSettings;
use crate::model::{
    target_density, ControlBox, CostSpec, KSegment, MarketParams, PenaltySpec, TargetDistribution,
};
use crate::optimizer::{Problem, SolveSettings};
use crate::grid::Grid;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub market: MarketConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    pub target: TargetDistribution,
    #[serde(default)]
    pub cost: CostConfig,
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub fokker_planck: FokkerPlanckConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "d_x_min")]
    pub x_min: f64,
    #[serde(default = "d_x_max")]
    pub x_max: f64,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_n")]
    pub n: usize,
}

fn d_x_min() -> f64 { 0.0 }
fn d_x_max() -> f64 { 12.0 }
fn d_m() -> usize { 241 }
fn d_n() -> usize { 100 }

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { x_min: 0.0, x_max: 12.0, m: 241, n: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default = "d_mu")]
    pub sigma: f64,
    /// Optional per-time-step price-of-risk magnitudes (length `grid.n`);
    /// omitted means the constant `mu / sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_schedule: Option<Vec<f64>>,
}

fn d_mu() -> f64 { 0.1 }

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig { mu: 0.1, sigma: 0.1, nu_schedule: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default = "d_x0")]
    pub x0: f64,
    #[serde(default = "d_mollifier")]
    pub mollifier_width: f64,
}

fn d_x0() -> f64 { 5.0 }
fn d_mollifier() -> f64 { 2.0 }

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig { x0: 5.0, mollifier_width: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    QuadraticShift {
        #[serde(default = "default_center")]
        a_center: f64,
        #[serde(default = "default_center")]
        b_center: f64,
        #[serde(default)]
        control_box: ControlBox,
    },
    CashInput {
        w: f64,
        l: f64,
        segments: Vec<KSegment>,
        #[serde(default)]
        control_box: ControlBox,
    },
}

fn default_center() -> f64 {
    0.2
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig::QuadraticShift {
            a_center: 0.2,
            b_center: 0.2,
            control_box: ControlBox::default(),
        }
    }
}

impl CostConfig {
    pub fn to_spec(&self) -> CostSpec {
        match self {
            CostConfig::QuadraticShift { a_center, b_center, control_box } => {
                CostSpec::QuadraticShift {
                    a_center: *a_center,
                    b_center: *b_center,
                    control_box: *control_box,
                }
            }
            CostConfig::CashInput { w, l, segments, control_box } => {
                CostSpec::CashInputPiecewise {
                    segments: segments.clone(),
                    w: *w,
                    l: *l,
                    control_box: *control_box,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyConfig {
    SquaredL2 { lambda: f64 },
    KullbackLeibler { lambda: f64 },
    Indicator,
}

impl PenaltyConfig {
    pub fn to_spec(&self) -> PenaltySpec {
        match self {
            PenaltyConfig::SquaredL2 { lambda } => PenaltySpec::SquaredL2 { lambda: *lambda },
            PenaltyConfig::KullbackLeibler { lambda } => {
                PenaltySpec::KullbackLeibler { lambda: *lambda }
            }
            PenaltyConfig::Indicator => PenaltySpec::Indicator,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "d_max_outer")]
    pub max_outer_iter: usize,
    #[serde(default = "d_memory")]
    pub lbfgs_memory: usize,
    #[serde(default = "d_c1")]
    pub armijo_c1: f64,
    #[serde(default = "d_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "d_fp_max")]
    pub fp_max_iter: usize,
    /// Optional extra stop requirement on the duality-gap certificate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_stop: Option<f64>,
    /// Truncated-Newton refinement once the gradient is small.
    #[serde(default)]
    pub newton_refine: bool,
    #[serde(default = "d_newton_switch")]
    pub newton_switch_tol: f64,
    #[serde(default = "d_newton_cg")]
    pub newton_max_cg: usize,
}

fn d_grad_tol() -> f64 { 1e-5 }
fn d_max_outer() -> usize { 500 }
fn d_memory() -> usize { 10 }
fn d_c1() -> f64 { 1e-4 }
fn d_fp_tol() -> f64 { 1e-8 }
fn d_fp_max() -> usize { 50 }
fn d_newton_switch() -> f64 { 1e-3 }
fn d_newton_cg() -> usize { 150 }

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            grad_tol: 1e-5,
            max_outer_iter: 500,
            lbfgs_memory: 10,
            armijo_c1: 1e-4,
            fp_tol: 1e-8,
            fp_max_iter: 50,
            gap_stop: None,
            newton_refine: false,
            newton_switch_tol: 1e-3,
            newton_max_cg: 150,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FokkerPlanckConfig {
    #[serde(default = "d_cfl")]
    pub cfl_safety: f64,
    #[serde(default = "d_true")]
    pub auto_substep: bool,
    #[serde(default = "d_neg_tol")]
    pub neg_tol: f64,
}

fn d_cfl() -> f64 { 0.5 }
fn d_true() -> bool { true }
fn d_neg_tol() -> f64 { 1e-10 }

impl Default for FokkerPlanckConfig {
    fn default() -> Self {
        let d = FpSettings::default();
        FokkerPlanckConfig { cfl_safety: d.cfl_safety, auto_substep: d.auto_substep, neg_tol: d.neg_tol }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "d_paths")]
    pub n_paths: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_paths() -> usize { 100_000 }
fn d_seed() -> u64 { 42 }

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig { enabled: false, n_paths: 100_000, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_dir")]
    pub dir: String,
    /// Emit a density snapshot every `snapshot_stride` coarse steps.
    #[serde(default = "d_stride")]
    pub snapshot_stride: usize,
}

fn d_dir() -> String { "run_output".into() }
fn d_stride() -> usize { 10 }

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "run_output".into(), snapshot_stride: 10 }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| SolverError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.market.sigma <= 0.0 {
            return Err(SolverError::Config("market.sigma must be positive".into()));
        }
        if let Some(sched) = &self.market.nu_schedule {
            if sched.len() != grid.n_steps {
                return Err(SolverError::Config(format!(
                    "market.nu_schedule must have one entry per time step ({}), got {}",
                    grid.n_steps,
                    sched.len()
                )));
            }
        }
        self.market()?;
        if self.initial.x0 < grid.x_min || self.initial.x0 > grid.x_max {
            return Err(SolverError::Config(format!(
                "initial.x0 = {} outside the grid domain",
                self.initial.x0
            )));
        }
        if self.initial.mollifier_width < 0.0 {
            return Err(SolverError::Config("initial.mollifier_width must be >= 0".into()));
        }
        self.target
            .validate()
            .map_err(|e| SolverError::Config(format!("target: {e}")))?;
        self.cost
            .to_spec()
            .validate()
            .map_err(|e| SolverError::Config(format!("cost: {e}")))?;
        self.penalty
            .to_spec()
            .validate()
            .map_err(|e| SolverError::Config(format!("penalty: {e}")))?;
        let o = &self.optimizer;
        if o.grad_tol <= 0.0 || o.fp_tol <= 0.0 || o.armijo_c1 <= 0.0 || o.armijo_c1 >= 1.0 {
            return Err(SolverError::Config(
                "optimizer tolerances must be positive (armijo_c1 in (0,1))".into(),
            ));
        }
        if o.max_outer_iter == 0 || o.fp_max_iter == 0 || o.lbfgs_memory == 0 {
            return Err(SolverError::Config("optimizer iteration caps must be >= 1".into()));
        }
        if self.fokker_planck.cfl_safety <= 0.0 || self.fokker_planck.cfl_safety > 1.0 {
            return Err(SolverError::Config("fokker_planck.cfl_safety must lie in (0, 1]".into()));
        }
        if self.montecarlo.n_paths == 0 {
            return Err(SolverError::Config("montecarlo.n_paths must be >= 1".into()));
        }
        if self.output.snapshot_stride == 0 {
            return Err(SolverError::Config("output.snapshot_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.x_min, self.grid.x_max, self.grid.m, self.grid.n)
    }

    pub fn market(&self) -> Result<MarketParams> {
        match &self.market.nu_schedule {
            Some(sched) => {
                MarketParams::with_schedule(self.market.mu, self.market.sigma, sched.clone())
            }
            None => MarketParams::scalar(self.market.mu, self.market.sigma),
        }
    }

    /// Materializes the solver problem: grid, densities, cost and penalty.
    /// An unset control-box stability slope resolves to the grid spacing.
    pub fn problem(&self) -> Result<Problem> {
        let grid = self.grid()?;
        let market = self.market()?;
        let target = target_density(&self.target, &grid)?;
        let rho0 = initial_density(self.initial.x0, &grid, self.initial.mollifier_width)?;
        let mut cost = self.cost.to_spec();
        cost.resolve_stability(grid.dx);
        Ok(Problem {
            grid,
            market,
            cost,
            penalty: self.penalty.to_spec(),
            target,
            rho0,
        })
    }

    pub fn solve_settings(&self) -> SolveSettings {
        SolveSettings {
            grad_tol: self.optimizer.grad_tol,
            max_outer_iter: self.optimizer.max_outer_iter,
            lbfgs_memory: self.optimizer.lbfgs_memory,
            armijo_c1: self.optimizer.armijo_c1,
            gap_stop: self.optimizer.gap_stop,
            newton_refine: self.optimizer.newton_refine,
            newton_switch_tol: self.optimizer.newton_switch_tol,
            newton_max_cg: self.optimizer.newton_max_cg,
            hjb: HjbSettings { fp_tol: self.optimizer.fp_tol, fp_max_iter: self.optimizer.fp_max_iter },
            fp: FpSettings {
                cfl_safety: self.fokker_planck.cfl_safety,
                auto_substep: self.fokker_planck.auto_substep,
                neg_tol: self.fokker_planck.neg_tol,
                ..FpSettings::default()
            },
        }
    }

    /// Canonical TOML echo with every default materialized.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
