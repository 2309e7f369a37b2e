//! Path-simulation oracle: Euler-Maruyama simulation of the wealth SDE under
//! the converged control fields, with per-path cash saving/input accumulation
//! and a Kolmogorov-Smirnov comparison against the PDE terminal density.
//!
//! Every path owns a ChaCha stream keyed by `(seed, path index)`, so serial
//! and parallel runs produce bit-identical ensembles.

use crate::error::{Result, SolverError};
use crate::grid::Grid;
use crate::hjb::ControlField;
use crate::model::MarketParams;
use crate::parallel::map_indexed;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub terminal_wealth: Vec<f64>,
    /// Accumulated `(nu sqrt(a) - b)^+ dt` per path.
    pub terminal_saving: Vec<f64>,
    /// Accumulated `(b - nu sqrt(a))^+ dt` per path.
    pub terminal_input: Vec<f64>,
    pub seed: u64,
    /// Fraction of paths that ever left the domain and were clamped back.
    pub clamp_fraction: f64,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.terminal_wealth.len()
    }

    pub fn mean_wealth(&self) -> f64 {
        self.terminal_wealth.iter().sum::<f64>() / self.n_paths() as f64
    }

    pub fn mean_saving(&self) -> f64 {
        self.terminal_saving.iter().sum::<f64>() / self.n_paths() as f64
    }

    pub fn mean_input(&self) -> f64 {
        self.terminal_input.iter().sum::<f64>() / self.n_paths() as f64
    }

    /// Standard error of the saving mean.
    pub fn saving_se(&self) -> f64 {
        let n = self.n_paths() as f64;
        let m = self.mean_saving();
        let var = self
            .terminal_saving
            .iter()
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Linear interpolation of a nodal field at `x`; outside the domain the
/// nearest boundary value applies.
#[inline]
fn interp(field: &[f64], x: f64, grid: &Grid) -> f64 {
    if x <= grid.x_min {
        return field[0];
    }
    if x >= grid.x_max {
        return field[grid.m - 1];
    }
    let s = (x - grid.x_min) / grid.dx;
    let j = (s as usize).min(grid.m - 2);
    let w = s - j as f64;
    field[j] * (1.0 - w) + field[j + 1] * w
}

/// Euler-Maruyama simulation with the solver's time step; controls are
/// piecewise constant in time and linearly interpolated in space. Fails when
/// more than 1% of the paths had to be clamped back into the domain.
pub fn simulate_paths(
    controls: &ControlField,
    x0: f64,
    n_paths: usize,
    seed: u64,
    grid: &Grid,
    market: &MarketParams,
) -> Result<PathEnsemble> {
    assert!(n_paths >= 1, "need at least one path");
    let dt = grid.dt;

    struct PathOutcome {
        wealth: f64,
        saving: f64,
        input: f64,
        clamped: bool,
    }

    let outcomes = map_indexed(n_paths, |path| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        let mut x = x0;
        let mut saving = 0.0;
        let mut input = 0.0;
        let mut clamped = false;
        for n in 0..grid.n_steps {
            let b = interp(&controls.b[n], x, grid);
            let a = interp(&controls.a[n], x, grid).max(0.0);
            let saturated = market.nu_at(n) * a.sqrt();
            let gap = saturated - b;
            if gap > 0.0 {
                saving += gap * dt;
            } else {
                input -= gap * dt;
            }
            let z: f64 = rng.sample(StandardNormal);
            x += b * dt + (a * dt).sqrt() * z;
            if x < grid.x_min {
                x = grid.x_min;
                clamped = true;
            } else if x > grid.x_max {
                x = grid.x_max;
                clamped = true;
            }
        }
        PathOutcome { wealth: x, saving, input, clamped }
    });

    let clamp_count = outcomes.iter().filter(|o| o.clamped).count();
    let clamp_fraction = clamp_count as f64 / n_paths as f64;
    if clamp_fraction > 0.01 {
        return Err(SolverError::ExcessiveClamping { fraction: clamp_fraction });
    }

    Ok(PathEnsemble {
        terminal_wealth: outcomes.iter().map(|o| o.wealth).collect(),
        terminal_saving: outcomes.iter().map(|o| o.saving).collect(),
        terminal_input: outcomes.iter().map(|o| o.input).collect(),
        seed,
        clamp_fraction,
    })
}

/// Sup distance between the empirical CDF of `samples` and the cumulative sum
/// of the nodal density. Both are treated as right-continuous step functions
/// (the node masses are atoms at the nodes), and the supremum is taken over
/// the merged jump set including left limits.
pub fn ks_distance(samples: &[f64], density: &[f64], grid: &Grid) -> f64 {
    assert!(!samples.is_empty(), "need samples");
    assert_eq!(density.len(), grid.m);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let weight = 1.0 / sorted.len() as f64;

    let total: f64 = density.iter().sum::<f64>() * grid.dx;
    let total = total.max(f64::MIN_POSITIVE);

    let mut i = 0;
    let mut j = 0;
    let mut f_emp = 0.0_f64;
    let mut f_mod = 0.0_f64;
    let mut d = 0.0_f64;
    while i < sorted.len() || j < grid.m {
        let zs = if i < sorted.len() { sorted[i] } else { f64::INFINITY };
        let zn = if j < grid.m { grid.x(j) } else { f64::INFINITY };
        let z = zs.min(zn);
        // Left limit at z.
        d = d.max((f_emp - f_mod).abs());
        while i < sorted.len() && sorted[i] == z {
            f_emp += weight;
            i += 1;
        }
        while j < grid.m && grid.x(j) == z {
            f_mod += density[j] * grid.dx / total;
            j += 1;
        }
        // Value at z.
        d = d.max((f_emp - f_mod).abs());
    }
    d
}
