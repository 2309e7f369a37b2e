//! Outer optimization loop: evaluate the dual objective and its gradient at a
//! terminal potential, update the potential by limited-memory BFGS with an
//! Armijo backtracking line search, and assemble the solve report.
//!
//! The dual objective minimized over the terminal slice `phi1` is
//!
//! ```text
//! V~(phi1) = C*(-phi1) + int phi0 d rho0,
//! ```
//!
//! with `phi0` produced by the backward HJB sweep. Its exact discrete gradient
//! is `(dC*/dphi1 + rho1) dx`, where `rho1` is the initial density pushed
//! forward through the transposed step matrices of that same sweep (the
//! adjoint of the linearized scheme; the control argmax contributes nothing to
//! first order). Using the transposed-solve density keeps the analytic
//! gradient in exact agreement with finite differences of `V~` and makes the
//! discrete duality gap a plain Fenchel-Young residual.
//!
//! The reported physical trajectories (`rho`, the with-saving `p`, the
//! without-input `q`) still come from the explicit forward scheme.

use crate::error::Result;
use crate::fokker_planck::{
    cash_diagnostics, fp_forward, wealth_trajectory, wealth_with_saving_trajectory,
    without_cash_input_trajectory, CashDiagnostics, FpSettings, FpTrajectory,
};
use crate::grid::{inner, norm_inf, norm_l2, solve_tridiagonal_transposed, Grid};
use crate::hjb::{assemble_step_matrix, solve_hjb, ControlField, DualPotential, HjbSettings, StepStats};
use crate::model::{conjugate, penalty_value, CostSpec, MarketParams, PenaltySpec};
use std::collections::VecDeque;

/// Fully assembled problem instance on a fixed grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid,
    pub market: MarketParams,
    pub cost: CostSpec,
    pub penalty: PenaltySpec,
    /// Target density evaluated on the grid (normalized).
    pub target: Vec<f64>,
    /// Initial (mollified point-mass) density on the grid.
    pub rho0: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveSettings {
    /// Stop when the sup norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_outer_iter: usize,
    pub lbfgs_memory: usize,
    pub armijo_c1: f64,
    /// Extra stopping requirement on the duality-gap certificate; `None`
    /// disables it.
    pub gap_stop: Option<f64>,
    /// Switch to truncated-Newton steps (Hessian-vector products by
    /// differencing the adjoint gradient, CG inner loop) once the gradient
    /// drops below `newton_switch_tol`. Off by default.
    pub newton_refine: bool,
    pub newton_switch_tol: f64,
    pub newton_max_cg: usize,
    pub hjb: HjbSettings,
    pub fp: FpSettings,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            grad_tol: 1e-5,
            max_outer_iter: 500,
            lbfgs_memory: 10,
            armijo_c1: 1e-4,
            gap_stop: None,
            newton_refine: false,
            newton_switch_tol: 1e-3,
            newton_max_cg: 150,
            hjb: HjbSettings::default(),
            fp: FpSettings::default(),
        }
    }
}

/// One dual evaluation: objective, gradient and the backward/adjoint fields.
#[derive(Debug, Clone)]
pub struct DualEval {
    pub v_tilde: f64,
    /// `(dC*/dphi1 + rho1_dual) * dx`, the exact discrete gradient.
    pub gradient: Vec<f64>,
    /// Adjoint density on every time level; entry `n_steps` drives the gradient.
    pub adjoint_slices: Vec<Vec<f64>>,
    pub potential: DualPotential,
    pub controls: ControlField,
    pub hjb_stats: Vec<StepStats>,
    pub kl_clamped: bool,
}

impl DualEval {
    pub fn rho1_dual(&self) -> &[f64] {
        self.adjoint_slices.last().unwrap()
    }
}

/// Solves the backward HJB sweep at `phi1` and pushes `rho0` forward through
/// the transposed step matrices.
pub fn dual_eval(problem: &Problem, phi1: &[f64], settings: &SolveSettings) -> Result<DualEval> {
    let grid = &problem.grid;
    let (potential, controls, hjb_stats) =
        solve_hjb(phi1, &problem.cost, &problem.market, grid, &settings.hjb)?;

    let mut adjoint_slices = Vec::with_capacity(grid.n_steps + 1);
    adjoint_slices.push(problem.rho0.clone());
    for n in 0..grid.n_steps {
        let (lower, diag, upper) = assemble_step_matrix(&controls.b[n], &controls.a[n], grid);
        let next =
            solve_tridiagonal_transposed(&lower, &diag, &upper, adjoint_slices.last().unwrap())?;
        adjoint_slices.push(next);
    }

    let conj = conjugate(&problem.penalty, phi1, &problem.target, grid.dx);
    let v_tilde = conj.value + inner(potential.phi0(), &problem.rho0, grid.dx);
    let rho1 = adjoint_slices.last().unwrap();
    let gradient: Vec<f64> = conj
        .gradient
        .iter()
        .zip(rho1)
        .map(|(c, r)| (c + r) * grid.dx)
        .collect();

    Ok(DualEval {
        v_tilde,
        gradient,
        adjoint_slices,
        potential,
        controls,
        hjb_stats,
        kl_clamped: conj.clamped,
    })
}

/// Public single-shot evaluation: the dual quantities plus the explicit
/// forward density (the physical `rho1`).
pub fn evaluate_dual(
    problem: &Problem,
    phi1: &[f64],
    settings: &SolveSettings,
) -> Result<(DualEval, FpTrajectory)> {
    let eval = dual_eval(problem, phi1, settings)?;
    let rho = wealth_trajectory(&problem.rho0, &eval.controls, &problem.grid, &settings.fp)?;
    Ok((eval, rho))
}

/// Running cost plus terminal penalty for a density trajectory. Each step's
/// cost row is paired with the density at the step's right endpoint, which is
/// the pairing under which the discrete duality gap telescopes exactly.
pub fn primal_cost(
    slices: &[Vec<f64>],
    controls: &ControlField,
    cost: &CostSpec,
    market: &MarketParams,
    penalty: &PenaltySpec,
    target: &[f64],
    grid: &Grid,
) -> f64 {
    let mut running = 0.0;
    for n in 0..grid.n_steps {
        let step_cost = cost.at_time(grid.t(n));
        let nu = market.nu_at(n);
        let rho = &slices[n + 1];
        let mut s = 0.0;
        for i in 0..grid.m {
            s += step_cost.running_cost(controls.b[n][i], controls.a[n][i], nu) * rho[i];
        }
        running += s;
    }
    running * grid.dx * grid.dt + penalty_value(penalty, slices.last().unwrap(), target, grid.dx)
}

/// Pointwise Fenchel-Young residual `C(rho1) + C*(-phi1) + <rho1, phi1>`,
/// the duality-gap certificate; nonnegative by construction and zero exactly
/// at complementary slackness. The indicator uses its tolerance-tube primal,
/// so the certificate is infinite while the terminal density is still outside
/// the tube.
pub fn fenchel_gap(
    penalty: &PenaltySpec,
    phi1: &[f64],
    rho1: &[f64],
    target: &[f64],
    dx: f64,
) -> f64 {
    let pairing = inner(rho1, phi1, dx);
    let conj_value = conjugate(penalty, phi1, target, dx).value;
    let c_term = match penalty {
        PenaltySpec::Indicator => crate::model::indicator_tube_value(rho1, target, dx),
        _ => penalty_value(penalty, rho1, target, dx),
    };
    c_term + conj_value + pairing
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    MaxIterations,
    LineSearchStalled,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub v_tilde: f64,
    pub grad_inf: f64,
    /// Accepted line-search step length (zero on the first record).
    pub step: f64,
    /// Total fixed-point solves across the backward sweep of this iterate.
    pub fp_total: usize,
    pub fp_median: usize,
}

/// Everything a converged (or best-so-far) run reports.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub phi1_opt: Vec<f64>,
    pub potential: DualPotential,
    pub controls: ControlField,
    /// `-V~` at the returned iterate (the dual objective value).
    pub dual_value: f64,
    pub v_tilde: f64,
    pub primal_cost: f64,
    pub duality_gap: f64,
    /// Physical wealth density under the explicit forward scheme.
    pub rho_trajectory: FpTrajectory,
    /// Wealth-with-saving density (quadratic-shift cost runs).
    pub p_trajectory: Option<FpTrajectory>,
    /// Without-cash-input density (cash-input cost runs).
    pub q_trajectory: Option<FpTrajectory>,
    /// Terminal density of the dual/adjoint propagation; this is the density
    /// the optimality system drives onto the target.
    pub rho1_dual: Vec<f64>,
    pub gradient: Vec<f64>,
    pub grad_inf: f64,
    pub cash: CashDiagnostics,
    pub iterations: Vec<IterationRecord>,
    pub termination: TerminationReason,
    pub kl_clamped: bool,
    /// HJB fixed-point steps that hit their iteration cap in the final sweep.
    pub hjb_unconverged_steps: usize,
    /// `||rho1 - target||_L2` for the explicit terminal density.
    pub l2_distance: f64,
    /// Same distance for the dual-consistent terminal density.
    pub l2_distance_dual: f64,
}

fn median_iterations(stats: &[StepStats]) -> usize {
    let mut counts: Vec<usize> = stats.iter().map(|s| s.iterations).collect();
    counts.sort_unstable();
    counts[counts.len() / 2]
}

struct LbfgsHistory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    memory: usize,
    /// Diagonal seed of the inverse-Hessian approximation. The curvature of
    /// the dual objective at node `i` scales with the local density, so the
    /// seed `1 / (target_i + tau)` equilibrates bulk and tail coordinates.
    seed: Vec<f64>,
}

impl LbfgsHistory {
    fn new(memory: usize, target: &[f64]) -> Self {
        let peak = target.iter().fold(0.0_f64, |m, v| m.max(*v));
        let tau = 0.02 * peak.max(1e-300);
        let seed = target.iter().map(|t| 1.0 / (t + tau)).collect();
        LbfgsHistory { pairs: VecDeque::new(), memory, seed }
    }

    fn reset(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yy: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Curvature guard: skip updates that would break positive
        // definiteness of the implicit Hessian approximation.
        if sy > 1e-12 * ss * yy && sy.is_finite() {
            if self.pairs.len() == self.memory {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, sy));
        }
    }

    /// Two-loop recursion: returns the quasi-Newton direction `-H g` with
    /// `H0 = gamma * diag(seed)`.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, sy) in self.pairs.iter().rev() {
            let alpha = s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        let gamma = match self.pairs.back() {
            Some((_, y_last, sy_last)) => {
                let ydy: f64 = y_last.iter().zip(&self.seed).map(|(y, d)| y * y * d).sum();
                if ydy > 0.0 {
                    sy_last / ydy
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (qi, di) in q.iter_mut().zip(&self.seed) {
            *qi *= gamma * di;
        }
        for ((s, y, sy), alpha) in self.pairs.iter().zip(alphas.iter().rev()) {
            let beta = y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        for v in &mut q {
            *v = -*v;
        }
        q
    }
}

/// Truncated preconditioned CG solve of the Newton system `H d = -g`. The
/// transport block of the Hessian is applied through central differences of
/// the adjoint terminal density; the conjugate block is diagonal and applied
/// analytically (its indicator-tube part varies on a scale far below any
/// usable differencing step).
fn newton_direction(
    problem: &Problem,
    settings: &SolveSettings,
    x: &[f64],
    grad: &[f64],
    seed: &[f64],
) -> Result<Vec<f64>> {
    let m = x.len();
    let dx = problem.grid.dx;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let xnorm = dot(x, x).sqrt();
    let conj_diag =
        crate::model::conjugate_hessian_diag(&problem.penalty, x, &problem.target);

    let hv = |v: &[f64]| -> Result<Vec<f64>> {
        let vnorm = dot(v, v).sqrt().max(1e-300);
        let eps = 1e-5 * (1.0 + xnorm) / vnorm;
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - eps * b).collect();
        let rp = dual_eval(problem, &xp, settings)?;
        let rm = dual_eval(problem, &xm, settings)?;
        Ok((0..m)
            .map(|i| {
                let transport =
                    (rp.rho1_dual()[i] - rm.rho1_dual()[i]) / (2.0 * eps) * dx;
                transport + conj_diag[i] * v[i] * dx
            })
            .collect())
    };

    let gnorm = dot(grad, grad).sqrt();
    let forcing = gnorm * gnorm.sqrt().min(0.5);

    let mut d = vec![0.0; m];
    let mut r: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut z: Vec<f64> = r.iter().zip(seed).map(|(ri, si)| ri * si).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..settings.newton_max_cg {
        if dot(&r, &r).sqrt() <= forcing {
            break;
        }
        let hp = hv(&p)?;
        let php = dot(&p, &hp);
        if php <= 1e-14 * dot(&p, &p) {
            break;
        }
        let alpha = rz / php;
        for i in 0..m {
            d[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        for i in 0..m {
            z[i] = r[i] * seed[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_new;
    }
    if dot(&d, &d) == 0.0 {
        d = grad.iter().zip(seed).map(|(g, s)| -g * s).collect();
    }
    Ok(d)
}

/// Limited-memory quasi-Newton descent on the dual objective starting from a
/// zero terminal potential. Returns the best-so-far report on
/// non-convergence; hard errors are limited to solver failures.
pub fn optimize(problem: &Problem, settings: &SolveSettings) -> Result<SolveReport> {
    optimize_from(problem, settings, vec![0.0; problem.grid.m])
}

/// [`optimize`] with an explicit starting potential (the solver's own runs
/// always start from zero).
pub fn optimize_from(
    problem: &Problem,
    settings: &SolveSettings,
    start: Vec<f64>,
) -> Result<SolveReport> {
    let grid = &problem.grid;
    let mut x = start;
    assert_eq!(x.len(), grid.m, "starting potential length mismatch");
    let mut eval = dual_eval(problem, &x, settings)?;
    let mut history = LbfgsHistory::new(settings.lbfgs_memory, &problem.target);
    let mut log = Vec::new();
    let mut kl_clamped = eval.kl_clamped;

    let record = |log: &mut Vec<IterationRecord>, iter: usize, e: &DualEval, step: f64| {
        log.push(IterationRecord {
            iter,
            v_tilde: e.v_tilde,
            grad_inf: norm_inf(&e.gradient),
            step,
            fp_total: e.hjb_stats.iter().map(|s| s.iterations).sum(),
            fp_median: median_iterations(&e.hjb_stats),
        });
    };
    record(&mut log, 0, &eval, 0.0);

    let converged = |e: &DualEval, x: &[f64]| {
        if norm_inf(&e.gradient) > settings.grad_tol {
            return false;
        }
        match settings.gap_stop {
            None => true,
            Some(tol) => {
                fenchel_gap(&problem.penalty, x, e.rho1_dual(), &problem.target, grid.dx).abs()
                    <= tol
            }
        }
    };

    let mut termination = TerminationReason::MaxIterations;
    let mut iter = 0;
    while iter < settings.max_outer_iter {
        if converged(&eval, &x) {
            termination = TerminationReason::Converged;
            break;
        }
        iter += 1;

        let newton_step =
            settings.newton_refine && norm_inf(&eval.gradient) <= settings.newton_switch_tol;
        let mut direction = if newton_step {
            newton_direction(problem, settings, &x, &eval.gradient, &history.seed)?
        } else {
            history.direction(&eval.gradient)
        };
        let mut slope: f64 = direction.iter().zip(&eval.gradient).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            // Not a descent direction: drop the history and fall back to
            // steepest descent.
            history.reset();
            direction = eval.gradient.iter().map(|g| -g).collect();
            slope = -eval.gradient.iter().map(|g| g * g).sum::<f64>();
        }

        let mut alpha = if history.pairs.is_empty() && !newton_step {
            // Cold start: aim for a unit-size move of the potential.
            (1.0 / norm_inf(&direction).max(1e-12)).min(1e4)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..55 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            let trial_eval = dual_eval(problem, &trial, settings)?;
            if trial_eval.v_tilde <= eval.v_tilde + settings.armijo_c1 * alpha * slope {
                accepted = Some((trial, trial_eval, alpha));
                break;
            }
            alpha *= 0.5;
        }

        if accepted.is_none() {
            // One plain gradient retry with a trust-region-capped step before
            // declaring stagnation.
            let trust = problem.penalty.lambda().map_or(1.0, |l| 1.0 / l);
            let ginf = norm_inf(&eval.gradient).max(1e-300);
            let mut alpha = trust.min(1.0) / ginf;
            let slope = -eval.gradient.iter().map(|g| g * g).sum::<f64>();
            for _ in 0..55 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&eval.gradient)
                    .map(|(xi, gi)| xi - alpha * gi)
                    .collect();
                let trial_eval = dual_eval(problem, &trial, settings)?;
                if trial_eval.v_tilde <= eval.v_tilde + settings.armijo_c1 * alpha * slope {
                    accepted = Some((trial, trial_eval, alpha));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                history.reset();
            }
        }

        match accepted {
            Some((trial, trial_eval, step)) => {
                let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = trial_eval
                    .gradient
                    .iter()
                    .zip(&eval.gradient)
                    .map(|(a, b)| a - b)
                    .collect();
                history.push(s, y);
                x = trial;
                eval = trial_eval;
                kl_clamped |= eval.kl_clamped;
                record(&mut log, iter, &eval, step);
            }
            None => {
                termination = TerminationReason::LineSearchStalled;
                break;
            }
        }
    }
    if termination == TerminationReason::MaxIterations && converged(&eval, &x) {
        termination = TerminationReason::Converged;
    }

    // Final artifacts from the converged controls.
    let rho_trajectory = wealth_trajectory(&problem.rho0, &eval.controls, grid, &settings.fp)?;
    let p_trajectory = match &problem.cost {
        CostSpec::QuadraticShift { .. } => Some(wealth_with_saving_trajectory(
            &problem.rho0,
            &eval.controls,
            &problem.market,
            grid,
            &settings.fp,
        )?),
        CostSpec::CashInputPiecewise { .. } => None,
    };
    let q_trajectory = match &problem.cost {
        CostSpec::CashInputPiecewise { .. } => Some(without_cash_input_trajectory(
            &problem.rho0,
            &eval.controls,
            &problem.market,
            grid,
            &settings.fp,
        )?),
        CostSpec::QuadraticShift { .. } => None,
    };
    let cash = cash_diagnostics(&eval.controls, &rho_trajectory.slices, &problem.market, grid);

    let primal = primal_cost(
        &eval.adjoint_slices,
        &eval.controls,
        &problem.cost,
        &problem.market,
        &problem.penalty,
        &problem.target,
        grid,
    );
    let dual_value = -eval.v_tilde;
    let diff_exp: Vec<f64> = rho_trajectory
        .terminal()
        .iter()
        .zip(&problem.target)
        .map(|(r, t)| r - t)
        .collect();
    let diff_dual: Vec<f64> = eval
        .rho1_dual()
        .iter()
        .zip(&problem.target)
        .map(|(r, t)| r - t)
        .collect();

    Ok(SolveReport {
        phi1_opt: x,
        dual_value,
        v_tilde: eval.v_tilde,
        primal_cost: primal,
        duality_gap: primal - dual_value,
        rho_trajectory,
        p_trajectory,
        q_trajectory,
        rho1_dual: eval.rho1_dual().to_vec(),
        gradient: eval.gradient.clone(),
        grad_inf: norm_inf(&eval.gradient),
        cash,
        iterations: log,
        termination,
        kl_clamped,
        hjb_unconverged_steps: eval.hjb_stats.iter().filter(|s| !s.converged).count(),
        l2_distance: norm_l2(&diff_exp, grid.dx),
        l2_distance_dual: norm_l2(&diff_dual, grid.dx),
        potential: eval.potential,
        controls: eval.controls,
    })
}

/// Explicit-scheme propagation is also exposed on the report for callers that
/// need the raw trajectory under custom drift fields.
pub fn explicit_forward(
    problem: &Problem,
    drift: &[Vec<f64>],
    diffusion: &[Vec<f64>],
    settings: &SolveSettings,
) -> Result<FpTrajectory> {
    fp_forward(&problem.rho0, drift, diffusion, &problem.grid, &settings.fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fokker_planck::{initial_density, mean, variance};
    use crate::grid::Grid;
    use crate::model::{target_density, ControlBox, TargetDistribution};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn reference_problem(penalty: PenaltySpec) -> Problem {
        let grid = Grid::new(0.0, 12.0, 241, 100).unwrap();
        let market = MarketParams::scalar(0.1, 0.1).unwrap();
        let target =
            target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &grid).unwrap();
        let rho0 = initial_density(5.0, &grid, 2.0).unwrap();
        Problem {
            grid,
            market,
            cost: CostSpec::QuadraticShift {
                a_center: 0.2,
                b_center: 0.2,
                control_box: ControlBox::default(),
            },
            penalty,
            target,
            rho0,
        }
    }

    fn coarse_problem(penalty: PenaltySpec) -> Problem {
        let grid = Grid::new(0.0, 12.0, 61, 40).unwrap();
        let market = MarketParams::scalar(0.1, 0.1).unwrap();
        let target =
            target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &grid).unwrap();
        let rho0 = initial_density(5.0, &grid, 2.0).unwrap();
        Problem {
            grid,
            market,
            cost: CostSpec::QuadraticShift {
                a_center: 0.2,
                b_center: 0.2,
                control_box: ControlBox::default(),
            },
            penalty,
            target,
            rho0,
        }
    }

    fn tight_settings() -> SolveSettings {
        SolveSettings {
            hjb: HjbSettings { fp_tol: 1e-12, fp_max_iter: 200 },
            ..SolveSettings::default()
        }
    }

    #[test]
    fn zero_potential_constant_controls() {
        let problem = reference_problem(PenaltySpec::Indicator);
        let settings = tight_settings();
        let (eval, rho) = evaluate_dual(&problem, &vec![0.0; problem.grid.m], &settings).unwrap();
        // phi stays 0, so V~ = C*(0) + 0 = 0 for the indicator.
        assert!(eval.v_tilde.abs() < 1e-12);
        // Constant (0.2, 0.2) controls push the point mass to N(5.2, sqrt(0.2)).
        let g = &problem.grid;
        let terminal = rho.terminal();
        let mollifier_var = (2.0 * g.dx) * (2.0 * g.dx);
        assert_relative_eq!(mean(terminal, g), 5.2, max_relative = 2e-3);
        assert_relative_eq!(variance(terminal, g), 0.2 + mollifier_var, max_relative = 0.02);
        // Gradient formula: (rho1 - target) dx for the indicator.
        for i in 0..g.m {
            let expect = (eval.rho1_dual()[i] - problem.target[i]) * g.dx;
            assert_relative_eq!(eval.gradient[i], expect, epsilon = 1e-14);
        }
        // The adjoint density also lands on the same heat-kernel moments.
        assert_relative_eq!(mean(eval.rho1_dual(), g), 5.2, max_relative = 2e-3);
        assert_relative_eq!(
            variance(eval.rho1_dual(), g),
            0.2 + mollifier_var,
            max_relative = 0.02
        );
    }

    #[test]
    fn constant_shift_leaves_indicator_objective_unchanged() {
        let problem = coarse_problem(PenaltySpec::Indicator);
        let settings = tight_settings();
        let g = &problem.grid;
        let phi1: Vec<f64> = g.nodes().iter().map(|x| 0.2 * ((x - 6.0) * 0.5).sin()).collect();
        let shifted: Vec<f64> = phi1.iter().map(|v| v + 3.0).collect();
        let e1 = dual_eval(&problem, &phi1, &settings).unwrap();
        let e2 = dual_eval(&problem, &shifted, &settings).unwrap();
        // The target and transported terms move by 3 * (mass) each and
        // cancel; only the tolerance-tube term of the conjugate responds, at
        // the tol * |shift| * domain scale.
        assert!((e1.v_tilde - e2.v_tilde).abs() < 5e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_on_coarse_grid() {
        let settings = tight_settings();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for penalty in [
            PenaltySpec::SquaredL2 { lambda: 5.0 },
            PenaltySpec::KullbackLeibler { lambda: 1.0 },
            PenaltySpec::Indicator,
        ] {
            let problem = coarse_problem(penalty);
            let g = &problem.grid;
            let phi1: Vec<f64> = g
                .nodes()
                .iter()
                .map(|x| 0.3 * ((x - 5.5) * 0.6).tanh() + 0.05 * (0.9 * x).sin())
                .collect();
            let eval = dual_eval(&problem, &phi1, &settings).unwrap();
            let eps = 1e-5;
            for _ in 0..6 {
                let i = rng.gen_range(0..g.m);
                let mut up = phi1.clone();
                up[i] += eps;
                let mut dn = phi1.clone();
                dn[i] -= eps;
                let vu = dual_eval(&problem, &up, &settings).unwrap().v_tilde;
                let vd = dual_eval(&problem, &dn, &settings).unwrap().v_tilde;
                let fd = (vu - vd) / (2.0 * eps);
                let an = eval.gradient[i];
                let scale = an.abs().max(1e-6);
                assert!(
                    ((fd - an) / scale).abs() < 1e-4,
                    "{penalty:?} node {i}: fd {fd:.8e} analytic {an:.8e}"
                );
            }
        }
    }

    #[test]
    fn adjoint_density_conserves_mass_exactly() {
        let problem = coarse_problem(PenaltySpec::Indicator);
        let settings = tight_settings();
        let g = &problem.grid;
        let phi1: Vec<f64> = g.nodes().iter().map(|x| 0.4 * ((x - 6.0) * 0.7).sin()).collect();
        let eval = dual_eval(&problem, &phi1, &settings).unwrap();
        for slice in &eval.adjoint_slices {
            assert_relative_eq!(crate::grid::integrate(slice, g.dx), 1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn primal_cost_vanishes_at_cost_center() {
        let problem = coarse_problem(PenaltySpec::SquaredL2 { lambda: 1.0 });
        let g = &problem.grid;
        let controls = ControlField {
            b: vec![vec![0.2; g.m]; g.n_steps],
            a: vec![vec![0.2; g.m]; g.n_steps],
        };
        let slices = vec![problem.target.clone(); g.n_steps + 1];
        let cost = primal_cost(
            &slices,
            &controls,
            &problem.cost,
            &problem.market,
            &problem.penalty,
            &problem.target,
            g,
        );
        assert!(cost.abs() < 1e-14);
    }

    #[test]
    fn weak_duality_holds_along_squared_l2_iterates() {
        let problem = coarse_problem(PenaltySpec::SquaredL2 { lambda: 5.0 });
        let settings = SolveSettings { max_outer_iter: 25, ..tight_settings() };
        let report = optimize(&problem, &settings).unwrap();
        // The Fenchel-Young form of the gap is exactly nonnegative for the
        // squared-L2 penalty.
        assert!(report.duality_gap >= -1e-10, "gap {}", report.duality_gap);
        // V~ non-increasing along accepted steps.
        for w in report.iterations.windows(2) {
            assert!(w[1].v_tilde <= w[0].v_tilde + 1e-12);
        }
    }

    #[test]
    fn squared_l2_stationarity_rearrangement() {
        let problem = coarse_problem(PenaltySpec::SquaredL2 { lambda: 5.0 });
        let settings = SolveSettings {
            grad_tol: 2e-8,
            max_outer_iter: 400,
            ..tight_settings()
        };
        let report = optimize(&problem, &settings).unwrap();
        assert_eq!(report.termination, TerminationReason::Converged);
        // gradient = (phi1/lambda - target + rho1) dx = 0 rearranges to
        // phi1 = lambda (target - rho1).
        let g = &problem.grid;
        for i in 0..g.m {
            let rhs = 5.0 * (problem.target[i] - report.rho1_dual[i]);
            assert!((report.phi1_opt[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_iteration_log() {
        let problem = coarse_problem(PenaltySpec::SquaredL2 { lambda: 2.0 });
        let settings = SolveSettings { max_outer_iter: 12, ..tight_settings() };
        let r1 = optimize(&problem, &settings).unwrap();
        let r2 = optimize(&problem, &settings).unwrap();
        assert_eq!(r1.iterations.len(), r2.iterations.len());
        for (a, b) in r1.iterations.iter().zip(&r2.iterations) {
            assert_eq!(a.v_tilde.to_bits(), b.v_tilde.to_bits());
            assert_eq!(a.grad_inf.to_bits(), b.grad_inf.to_bits());
            assert_eq!(a.step.to_bits(), b.step.to_bits());
        }
        for (a, b) in r1.phi1_opt.iter().zip(&r2.phi1_opt) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
