//! Explicit forward propagation of densities under given drift/diffusion
//! fields, plus the cash saving/input diagnostics.
//!
//! The scheme is the central-difference explicit update
//!
//! ```text
//! rho_i^{n+1} = rho_i^n - dt/(2 dx) (b_{i+1} rho_{i+1} - b_{i-1} rho_{i-1})
//!                       + dt/(2 dx^2) (a_{i+1} rho_{i+1} - 2 a_i rho_i + a_{i-1} rho_{i-1})
//! ```
//!
//! applied on interior nodes with the boundary densities pinned to zero. The
//! fluxes telescope, so mass is conserved up to the (validated, negligible)
//! density touching the boundary. Stability is maintained by substepping each
//! coarse solver step on a refined time grid with the controls held constant.

use crate::error::{Result, SolverError};
use crate::grid::{integrate, Grid};
use crate::hjb::ControlField;
use crate::model::MarketParams;

#[derive(Debug, Clone, Copy)]
pub struct FpSettings {
    /// Safety factor applied to the stability bound.
    pub cfl_safety: f64,
    /// Refine the time grid when the coarse step violates the bound; when
    /// false a violating step is rejected instead.
    pub auto_substep: bool,
    /// Densities below `-neg_tol` are reported (never clipped).
    pub neg_tol: f64,
    pub substep_cap: usize,
}

impl Default for FpSettings {
    fn default() -> Self {
        FpSettings { cfl_safety: 0.5, auto_substep: true, neg_tol: 1e-10, substep_cap: 100_000 }
    }
}

/// Density on every coarse time level plus conservation diagnostics.
#[derive(Debug, Clone)]
pub struct FpTrajectory {
    /// `n_steps + 1` slices of length `m`.
    pub slices: Vec<Vec<f64>>,
    /// Most negative density value seen anywhere.
    pub min_density: f64,
    /// Largest per-step mass change.
    pub max_step_mass_change: f64,
    /// |terminal mass - initial mass|.
    pub mass_drift: f64,
    pub total_substeps: usize,
    /// True when `min_density < -neg_tol`.
    pub negativity_reported: bool,
}

impl FpTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.slices.last().unwrap()
    }
}

/// Mollified point mass at `x0`: a discrete Gaussian of standard deviation
/// `width * dx`, renormalized. Width zero puts all mass on the nearest node.
pub fn initial_density(x0: f64, grid: &Grid, width: f64) -> Result<Vec<f64>> {
    if !(x0 >= grid.x_min && x0 <= grid.x_max) {
        return Err(SolverError::InitialOutsideDomain {
            x0,
            x_min: grid.x_min,
            x_max: grid.x_max,
        });
    }
    let mut rho = vec![0.0; grid.m];
    if width <= 0.0 {
        rho[grid.nearest_node(x0)] = 1.0 / grid.dx;
        return Ok(rho);
    }
    let sd = width * grid.dx;
    for i in 0..grid.m {
        let z = (grid.x(i) - x0) / sd;
        rho[i] = (-0.5 * z * z).exp();
    }
    let mass = integrate(&rho, grid.dx);
    for v in &mut rho {
        *v /= mass;
    }
    Ok(rho)
}

fn substep_count(
    drift_row: &[f64],
    diffusion_row: &[f64],
    grid: &Grid,
    settings: &FpSettings,
) -> Result<usize> {
    let max_a = diffusion_row.iter().fold(0.0_f64, |m, v| m.max(*v));
    let max_b = drift_row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut stable = f64::INFINITY;
    if max_a > 0.0 {
        stable = stable.min(grid.dx * grid.dx / max_a);
    }
    if max_b > 0.0 {
        stable = stable.min(grid.dx / max_b);
    }
    stable *= settings.cfl_safety;
    if !stable.is_finite() {
        return Ok(1);
    }
    let n = (grid.dt / stable).ceil().max(1.0) as usize;
    if n > 1 && !settings.auto_substep {
        return Err(SolverError::CflViolation { dt: grid.dt, stable });
    }
    if n > settings.substep_cap {
        return Err(SolverError::SubstepCap { substeps: n, cap: settings.substep_cap });
    }
    Ok(n)
}

/// Propagates `rho0` through all coarse steps under per-step drift and
/// diffusion rows (`n_steps` rows of length `m` each).
pub fn fp_forward(
    rho0: &[f64],
    drift: &[Vec<f64>],
    diffusion: &[Vec<f64>],
    grid: &Grid,
    settings: &FpSettings,
) -> Result<FpTrajectory> {
    assert_eq!(rho0.len(), grid.m);
    assert_eq!(drift.len(), grid.n_steps);
    assert_eq!(diffusion.len(), grid.n_steps);

    let m = grid.m;
    let mut slices = Vec::with_capacity(grid.n_steps + 1);
    slices.push(rho0.to_vec());
    let mass0 = integrate(rho0, grid.dx);
    let mut prev_mass = mass0;
    let mut min_density = rho0.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut max_step_mass_change = 0.0_f64;
    let mut total_substeps = 0;

    let mut rho = rho0.to_vec();
    let mut next = vec![0.0; m];
    for n in 0..grid.n_steps {
        let b = &drift[n];
        let a = &diffusion[n];
        let sub = substep_count(b, a, grid, settings)?;
        total_substeps += sub;
        let dt = grid.dt / sub as f64;
        let adv = dt / (2.0 * grid.dx);
        let dif = dt / (2.0 * grid.dx * grid.dx);
        for _ in 0..sub {
            next[0] = 0.0;
            next[m - 1] = 0.0;
            for i in 1..m - 1 {
                next[i] = rho[i] - adv * (b[i + 1] * rho[i + 1] - b[i - 1] * rho[i - 1])
                    + dif * (a[i + 1] * rho[i + 1] - 2.0 * a[i] * rho[i] + a[i - 1] * rho[i - 1]);
            }
            std::mem::swap(&mut rho, &mut next);
        }
        for v in &rho {
            if *v < min_density {
                min_density = *v;
            }
        }
        let mass = integrate(&rho, grid.dx);
        max_step_mass_change = max_step_mass_change.max((mass - prev_mass).abs());
        prev_mass = mass;
        slices.push(rho.clone());
    }

    let mass_drift = (prev_mass - mass0).abs();
    Ok(FpTrajectory {
        slices,
        min_density,
        max_step_mass_change,
        mass_drift,
        total_substeps,
        negativity_reported: min_density < -settings.neg_tol,
    })
}

/// Density of the wealth itself: drift `b*`, diffusion `a*`.
pub fn wealth_trajectory(
    rho0: &[f64],
    controls: &ControlField,
    grid: &Grid,
    settings: &FpSettings,
) -> Result<FpTrajectory> {
    fp_forward(rho0, &controls.b, &controls.a, grid, settings)
}

/// Density of wealth plus accumulated cash saving: the drift is lifted to the
/// saturated value `nu sqrt(a*)`.
pub fn wealth_with_saving_trajectory(
    rho0: &[f64],
    controls: &ControlField,
    market: &MarketParams,
    grid: &Grid,
    settings: &FpSettings,
) -> Result<FpTrajectory> {
    let drift: Vec<Vec<f64>> = (0..grid.n_steps)
        .map(|n| {
            let nu = market.nu_at(n);
            controls.a[n].iter().map(|a| nu * a.sqrt()).collect()
        })
        .collect();
    fp_forward(rho0, &drift, &controls.a, grid, settings)
}

/// Density of wealth net of cash input: drift clipped to `min(b*, nu sqrt(a*))`.
pub fn without_cash_input_trajectory(
    rho0: &[f64],
    controls: &ControlField,
    market: &MarketParams,
    grid: &Grid,
    settings: &FpSettings,
) -> Result<FpTrajectory> {
    let drift: Vec<Vec<f64>> = (0..grid.n_steps)
        .map(|n| {
            let nu = market.nu_at(n);
            controls.b[n]
                .iter()
                .zip(&controls.a[n])
                .map(|(b, a)| b.min(nu * a.sqrt()))
                .collect()
        })
        .collect();
    fp_forward(rho0, &drift, &controls.a, grid, settings)
}

/// Expected accumulated cash saving and cash input over the horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct CashDiagnostics {
    /// `int (nu sqrt(a*) - b*)^+ rho dx dt`
    pub expected_saving: f64,
    /// `int (b* - nu sqrt(a*))^+ rho dx dt`
    pub expected_input: f64,
}

/// Time-space quadrature of the saving/input rates weighted by the density.
/// Each step is paired with the density at its left endpoint, matching the
/// per-step accumulation of the path simulator.
pub fn cash_diagnostics(
    controls: &ControlField,
    rho_slices: &[Vec<f64>],
    market: &MarketParams,
    grid: &Grid,
) -> CashDiagnostics {
    let mut saving = 0.0;
    let mut input = 0.0;
    for n in 0..grid.n_steps {
        let nu = market.nu_at(n);
        let rho = &rho_slices[n];
        let mut s = 0.0;
        let mut c = 0.0;
        for i in 0..grid.m {
            let sat = nu * controls.a[n][i].sqrt();
            let gap = sat - controls.b[n][i];
            if gap > 0.0 {
                s += gap * rho[i];
            } else {
                c -= gap * rho[i];
            }
        }
        saving += s * grid.dx * grid.dt;
        input += c * grid.dx * grid.dt;
    }
    CashDiagnostics { expected_saving: saving, expected_input: input }
}

pub fn mean(rho: &[f64], grid: &Grid) -> f64 {
    (0..grid.m).map(|i| grid.x(i) * rho[i]).sum::<f64>() * grid.dx
}

pub fn variance(rho: &[f64], grid: &Grid) -> f64 {
    let mu = mean(rho, grid);
    (0..grid.m)
        .map(|i| (grid.x(i) - mu) * (grid.x(i) - mu) * rho[i])
        .sum::<f64>()
        * grid.dx
}
