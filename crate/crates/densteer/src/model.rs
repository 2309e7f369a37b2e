//! Market parameters, target distributions, cost functions and penalty
//! functionals together with their convex conjugates.
//!
//! Notation used throughout: `b` is the wealth drift control, `a >= 0` the
//! wealth diffusion (variance rate) control, `nu` the market price of risk
//! magnitude. A self-financing portfolio can only realize pairs inside the
//! cone `(b^+)^2 <= nu^2 a`.

use crate::error::{Result, SolverError};
use crate::grid::{integrate, Grid};
use serde::{Deserialize, Serialize};

/// Floor used inside logarithms of the relative-entropy penalty.
pub const KL_DENSITY_FLOOR: f64 = 1e-12;
/// Exponent clamp for the relative-entropy conjugate.
pub const KL_EXP_CLAMP: f64 = 700.0;
/// Sup-norm tolerance of the indicator penalty: deviations inside the tube
/// count as a met constraint. The conjugate uses the same tolerance, which
/// keeps the dual problem attained (the exact-equality indicator has
/// unbounded dual potentials wherever the target density is vanishingly
/// small).
pub const INDICATOR_TOL: f64 = 1e-6;
/// Smoothing width of the |phi| term in the indicator conjugate.
pub const INDICATOR_SMOOTHING: f64 = 1e-6;
/// Nodes with |x| below this are skipped when inverting drift to a weight.
pub const WEIGHT_X_EPS: f64 = 1e-12;

/// Drift/volatility of the risky asset and the market-price-of-risk magnitude
/// per time step.
#[derive(Debug, Clone)]
pub struct MarketParams {
    pub mu: f64,
    pub sigma: f64,
    /// One value per time step; `None` means the constant `mu / sigma`.
    nu_schedule: Option<Vec<f64>>,
}

impl MarketParams {
    pub fn scalar(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(SolverError::InvalidMarket(format!(
                "need finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        if mu / sigma < 0.0 {
            return Err(SolverError::InvalidMarket(
                "price of risk mu/sigma must be nonnegative".into(),
            ));
        }
        Ok(MarketParams { mu, sigma, nu_schedule: None })
    }

    pub fn with_schedule(mu: f64, sigma: f64, nu: Vec<f64>) -> Result<Self> {
        let mut market = Self::scalar(mu, sigma)?;
        if nu.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SolverError::InvalidMarket(
                "nu schedule entries must be finite and nonnegative".into(),
            ));
        }
        market.nu_schedule = Some(nu);
        Ok(market)
    }

    /// Price-of-risk magnitude for time step `n` (the interval `[t_n, t_{n+1})`).
    pub fn nu_at(&self, n: usize) -> f64 {
        match &self.nu_schedule {
            Some(sched) => sched[n.min(sched.len() - 1)],
            None => self.mu / self.sigma,
        }
    }

    pub fn schedule_len(&self) -> Option<usize> {
        self.nu_schedule.as_ref().map(|s| s.len())
    }
}

/// Prescribed terminal distribution of wealth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetDistribution {
    Normal { mean: f64, sd: f64 },
    Mixture { components: Vec<MixtureComponent> },
    Weibull { shape: f64, scale: f64 },
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
    PointMass { location: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn weibull_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let z = x / scale;
    (shape / scale) * z.powf(shape - 1.0) * (-z.powf(shape)).exp()
}

impl TargetDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetDistribution::Normal { sd, .. } => {
                if !(*sd > 0.0) {
                    return Err(SolverError::InvalidTarget("sd must be positive".into()));
                }
            }
            TargetDistribution::Mixture { components } => {
                if components.is_empty() {
                    return Err(SolverError::InvalidTarget("empty mixture".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| c.weight < 0.0) {
                    return Err(SolverError::InvalidTarget(
                        "mixture weights must be nonnegative and sum to 1".into(),
                    ));
                }
                if components.iter().any(|c| !(c.sd > 0.0)) {
                    return Err(SolverError::InvalidTarget("component sd must be positive".into()));
                }
            }
            TargetDistribution::Weibull { shape, scale } => {
                if !(*shape > 0.0) || !(*scale > 0.0) {
                    return Err(SolverError::InvalidTarget(
                        "shape and scale must be positive".into(),
                    ));
                }
            }
            TargetDistribution::Tabulated { nodes, values } => {
                if nodes.len() != values.len() || nodes.len() < 2 {
                    return Err(SolverError::InvalidTarget(
                        "tabulated target needs matching nodes/values of length >= 2".into(),
                    ));
                }
                if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(SolverError::InvalidTarget(
                        "tabulated values must be finite and nonnegative".into(),
                    ));
                }
                if nodes.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(SolverError::InvalidTarget(
                        "tabulated nodes must be strictly increasing".into(),
                    ));
                }
            }
            TargetDistribution::PointMass { location } => {
                if !location.is_finite() {
                    return Err(SolverError::InvalidTarget("location must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Pointwise density, defined for the continuous variants.
    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            TargetDistribution::Normal { mean, sd } => normal_pdf(x, *mean, *sd),
            TargetDistribution::Mixture { components } => components
                .iter()
                .map(|c| c.weight * normal_pdf(x, c.mean, c.sd))
                .sum(),
            TargetDistribution::Weibull { shape, scale } => weibull_pdf(x, *shape, *scale),
            TargetDistribution::Tabulated { nodes, values } => {
                if x <= nodes[0] || x >= *nodes.last().unwrap() {
                    return 0.0;
                }
                let k = nodes.partition_point(|n| *n <= x) - 1;
                let t = (x - nodes[k]) / (nodes[k + 1] - nodes[k]);
                values[k] * (1.0 - t) + values[k + 1] * t
            }
            TargetDistribution::PointMass { .. } => 0.0,
        }
    }
}

/// Evaluates the target on the grid, checks that the domain captures at least
/// 99.9% of its mass, and renormalizes so that the rectangle rule gives exactly 1.
pub fn target_density(target: &TargetDistribution, grid: &Grid) -> Result<Vec<f64>> {
    target.validate()?;
    if let TargetDistribution::PointMass { location } = target {
        if *location < grid.x_min || *location > grid.x_max {
            return Err(SolverError::DomainCoverage { mass: 0.0 });
        }
        let mut rho = vec![0.0; grid.m];
        rho[grid.nearest_node(*location)] = 1.0 / grid.dx;
        return Ok(rho);
    }
    let mut rho: Vec<f64> = (0..grid.m).map(|i| target.pdf(grid.x(i))).collect();
    let mass = integrate(&rho, grid.dx);
    let coverage_floor = match target {
        // A tabulated target is already a discrete object; only guard against
        // gross truncation or an unnormalized table.
        TargetDistribution::Tabulated { .. } => {
            if (mass - 1.0).abs() > 1e-6 {
                return Err(SolverError::InvalidTarget(format!(
                    "tabulated target integrates to {mass:.8} on the grid"
                )));
            }
            0.999
        }
        _ => 0.999,
    };
    if mass < coverage_floor {
        return Err(SolverError::DomainCoverage { mass });
    }
    for v in &mut rho {
        *v /= mass;
    }
    Ok(rho)
}

/// Compact admissible box for the controls: `a in [0, a_max]`, `b in [b_min, b_max]`,
/// together with the discrete stability cone `a >= a_min_slope * |b|`.
///
/// The slope keeps the explicit forward scheme a positive operator: with
/// `a_min_slope = dx` every stencil coefficient stays nonnegative, so the
/// propagated densities cannot go negative. `None` resolves to the grid
/// spacing when the box enters a solve; an explicit `0` disables the cone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControlBox {
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_min_slope: Option<f64>,
}

impl Default for ControlBox {
    fn default() -> Self {
        // Wide enough that the box stays inactive on the bulk of the mass for
        // the reference experiments, including the cash-input sprints.
        ControlBox { a_max: 6.0, b_min: -20.0, b_max: 20.0, a_min_slope: None }
    }
}

impl ControlBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0) || !(self.b_min < self.b_max) {
            return Err(SolverError::InvalidCost(format!(
                "control box needs a_max > 0 and b_min < b_max, got {self:?}"
            )));
        }
        if let Some(s) = self.a_min_slope {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(SolverError::InvalidCost(format!(
                    "a_min_slope must be finite and nonnegative, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn slope(&self) -> f64 {
        self.a_min_slope.unwrap_or(0.0)
    }

    /// Fills an unset stability slope (used when a box is bound to a grid).
    pub fn resolve_slope(&mut self, dx: f64) {
        if self.a_min_slope.is_none() {
            self.a_min_slope = Some(dx);
        }
    }
}

/// Piecewise-constant schedule for the cash-input penalty coefficient `K(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub k: f64,
}

/// Running cost on the controls.
#[derive(Debug, Clone)]
pub enum CostSpec {
    /// `F(b, a) = (a - a_center)^2 + (b - b_center)^2` with the feasibility
    /// cone `(b^+)^2 <= nu^2 a` enforced on the admissible set.
    QuadraticShift { a_center: f64, b_center: f64, control_box: ControlBox },
    /// Piecewise-quadratic cost that charges `K(t)` for drift beyond the cone
    /// (cash input) and keeps small coercivity terms `w a^2` and `l b^2`.
    /// The cone is *not* enforced; `b` ranges over the whole box.
    CashInputPiecewise { segments: Vec<KSegment>, w: f64, l: f64, control_box: ControlBox },
}

impl CostSpec {
    pub fn quadratic_default() -> Self {
        CostSpec::QuadraticShift {
            a_center: 0.2,
            b_center: 0.2,
            control_box: ControlBox::default(),
        }
    }

    pub fn control_box(&self) -> &ControlBox {
        match self {
            CostSpec::QuadraticShift { control_box, .. } => control_box,
            CostSpec::CashInputPiecewise { control_box, .. } => control_box,
        }
    }

    /// Binds an unset stability slope to the grid spacing.
    pub fn resolve_stability(&mut self, dx: f64) {
        match self {
            CostSpec::QuadraticShift { control_box, .. }
            | CostSpec::CashInputPiecewise { control_box, .. } => control_box.resolve_slope(dx),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.control_box().validate()?;
        match self {
            CostSpec::QuadraticShift { a_center, b_center, .. } => {
                if !a_center.is_finite() || !b_center.is_finite() {
                    return Err(SolverError::InvalidCost("cost centers must be finite".into()));
                }
            }
            CostSpec::CashInputPiecewise { segments, w, l, .. } => {
                if !(*w > 0.0) || !(*l > 0.0) {
                    return Err(SolverError::InvalidCost("w and l must be positive".into()));
                }
                if segments.is_empty() {
                    return Err(SolverError::InvalidCost("empty K schedule".into()));
                }
                let mut sorted = segments.clone();
                sorted.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
                let eps = 1e-12;
                if (sorted[0].t_start).abs() > eps {
                    return Err(SolverError::InvalidCost("K schedule must start at t = 0".into()));
                }
                for w2 in sorted.windows(2) {
                    if (w2[0].t_end - w2[1].t_start).abs() > eps {
                        return Err(SolverError::InvalidCost(
                            "K schedule segments must tile [0,1] without gaps or overlap".into(),
                        ));
                    }
                }
                if (sorted.last().unwrap().t_end - 1.0).abs() > eps {
                    return Err(SolverError::InvalidCost("K schedule must end at t = 1".into()));
                }
                if sorted.iter().any(|s| !(s.k > 0.0) || s.t_end <= s.t_start) {
                    return Err(SolverError::InvalidCost(
                        "K schedule needs k > 0 and t_start < t_end".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Cost coefficients frozen at one time step.
    pub fn at_time(&self, t: f64) -> StepCost {
        match self {
            CostSpec::QuadraticShift { a_center, b_center, control_box } => StepCost {
                kind: StepCostKind::QuadraticShift { a_center: *a_center, b_center: *b_center },
                control_box: *control_box,
            },
            CostSpec::CashInputPiecewise { segments, w, l, control_box } => {
                let k = segments
                    .iter()
                    .find(|s| t >= s.t_start && t < s.t_end)
                    .or_else(|| segments.iter().find(|s| (t - s.t_end).abs() < 1e-12))
                    .map(|s| s.k)
                    .unwrap_or_else(|| segments.last().unwrap().k);
                StepCost {
                    kind: StepCostKind::CashInput { k, w: *w, l: *l },
                    control_box: *control_box,
                }
            }
        }
    }
}

/// Per-step view of the cost with the schedule resolved.
#[derive(Debug, Clone, Copy)]
pub struct StepCost {
    pub kind: StepCostKind,
    pub control_box: ControlBox,
}

#[derive(Debug, Clone, Copy)]
pub enum StepCostKind {
    QuadraticShift { a_center: f64, b_center: f64 },
    CashInput { k: f64, w: f64, l: f64 },
}

impl StepCost {
    /// `F(b, a)` without the cone indicator (the cone restricts the admissible
    /// set of the quadratic-shift variant instead).
    pub fn running_cost(&self, b: f64, a: f64, nu: f64) -> f64 {
        match self.kind {
            StepCostKind::QuadraticShift { a_center, b_center } => {
                (a - a_center).powi(2) + (b - b_center).powi(2)
            }
            StepCostKind::CashInput { k, w, l } => {
                if b < 0.0 {
                    l * b * b + w * a * a
                } else if b * b <= nu * nu * a {
                    w * a * a
                } else {
                    k * (b * b - nu * nu * a) + w * a * a
                }
            }
        }
    }

    /// Whether the feasibility cone restricts the admissible controls.
    pub fn cone_constrained(&self) -> bool {
        matches!(self.kind, StepCostKind::QuadraticShift { .. })
    }
}

/// Penalty functional on the terminal density mismatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltySpec {
    SquaredL2 { lambda: f64 },
    KullbackLeibler { lambda: f64 },
    Indicator,
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PenaltySpec::SquaredL2 { lambda } | PenaltySpec::KullbackLeibler { lambda } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return Err(SolverError::InvalidPenalty(format!(
                        "lambda must be finite and positive, got {lambda}"
                    )));
                }
            }
            PenaltySpec::Indicator => {}
        }
        Ok(())
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            PenaltySpec::SquaredL2 { lambda } | PenaltySpec::KullbackLeibler { lambda } => {
                Some(*lambda)
            }
            PenaltySpec::Indicator => None,
        }
    }
}

/// Penalty `C(rho1, target)` evaluated with the rectangle rule.
pub fn penalty_value(penalty: &PenaltySpec, rho1: &[f64], target: &[f64], dx: f64) -> f64 {
    debug_assert_eq!(rho1.len(), target.len());
    match penalty {
        PenaltySpec::SquaredL2 { lambda } => {
            let quad: f64 = rho1.iter().zip(target).map(|(r, t)| (r - t) * (r - t)).sum();
            0.5 * lambda * quad * dx
        }
        PenaltySpec::KullbackLeibler { lambda } => {
            let mut s = 0.0;
            for (r, t) in rho1.iter().zip(target) {
                let r = r.max(KL_DENSITY_FLOOR);
                let t = t.max(KL_DENSITY_FLOOR);
                s += r * (r / t).ln();
            }
            lambda * s * dx
        }
        PenaltySpec::Indicator => {
            let sup = rho1
                .iter()
                .zip(target)
                .fold(0.0_f64, |acc, (r, t)| acc.max((r - t).abs()));
            if sup <= INDICATOR_TOL {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Result of a conjugate evaluation; `clamped` flags that the relative-entropy
/// exponential had to be truncated.
#[derive(Debug, Clone)]
pub struct ConjugateEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub clamped: bool,
}

/// Smoothed absolute value used by the indicator conjugate; zero at zero with
/// zero slope, asymptotically `|phi|`.
#[inline]
fn smooth_abs(phi: f64) -> f64 {
    let d = INDICATOR_SMOOTHING;
    (phi * phi + d * d).sqrt() - d
}

#[inline]
fn smooth_abs_prime(phi: f64) -> f64 {
    let d = INDICATOR_SMOOTHING;
    phi / (phi * phi + d * d).sqrt()
}

/// Convex conjugate `C*(-phi1)` of the penalty and its pointwise functional
/// derivative with respect to `phi1`:
///
/// - squared L2: value `int(-phi1 rho_bar + phi1^2 / (2 lambda))`,
///   gradient `-rho_bar + phi1 / lambda`
/// - relative entropy: value `int lambda rho_bar exp(-phi1/lambda - 1)`,
///   gradient `-rho_bar exp(-phi1/lambda - 1)`
/// - indicator: value `int(-phi1 rho_bar + tol |phi1|)`, gradient
///   `-rho_bar + tol sign(phi1)`, the conjugate of the sup-norm tube of
///   radius [`INDICATOR_TOL`] (with `|.|` and `sign` smoothed on the
///   [`INDICATOR_SMOOTHING`] scale). The tube term vanishes at `phi1 = 0`
///   and caps the potential wherever the target carries no mass.
pub fn conjugate(penalty: &PenaltySpec, phi1: &[f64], target: &[f64], dx: f64) -> ConjugateEval {
    debug_assert_eq!(phi1.len(), target.len());
    match penalty {
        PenaltySpec::SquaredL2 { lambda } => {
            let value: f64 = phi1
                .iter()
                .zip(target)
                .map(|(p, t)| -p * t + p * p / (2.0 * lambda))
                .sum::<f64>()
                * dx;
            let gradient = phi1.iter().zip(target).map(|(p, t)| -t + p / lambda).collect();
            ConjugateEval { value, gradient, clamped: false }
        }
        PenaltySpec::KullbackLeibler { lambda } => {
            let mut clamped = false;
            let mut value = 0.0;
            let mut gradient = Vec::with_capacity(phi1.len());
            for (p, t) in phi1.iter().zip(target) {
                let mut expo = -p / lambda - 1.0;
                if expo.abs() > KL_EXP_CLAMP {
                    expo = expo.clamp(-KL_EXP_CLAMP, KL_EXP_CLAMP);
                    clamped = true;
                }
                let e = expo.exp();
                value += lambda * t * e;
                gradient.push(-t * e);
            }
            ConjugateEval { value: value * dx, gradient, clamped }
        }
        PenaltySpec::Indicator => {
            let value: f64 = phi1
                .iter()
                .zip(target)
                .map(|(p, t)| -p * t + INDICATOR_TOL * smooth_abs(*p))
                .sum::<f64>()
                * dx;
            let gradient = phi1
                .iter()
                .zip(target)
                .map(|(p, t)| -t + INDICATOR_TOL * smooth_abs_prime(*p))
                .collect();
            ConjugateEval { value, gradient, clamped: false }
        }
    }
}

/// Pointwise second derivative of `C*(-phi1)` with respect to `phi1` (without
/// the quadrature weight); the conjugate's exact contribution to the dual
/// Hessian diagonal.
pub fn conjugate_hessian_diag(penalty: &PenaltySpec, phi1: &[f64], target: &[f64]) -> Vec<f64> {
    match penalty {
        PenaltySpec::SquaredL2 { lambda } => vec![1.0 / lambda; phi1.len()],
        PenaltySpec::KullbackLeibler { lambda } => phi1
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let expo = (-p / lambda - 1.0).clamp(-KL_EXP_CLAMP, KL_EXP_CLAMP);
                t / lambda * expo.exp()
            })
            .collect(),
        PenaltySpec::Indicator => phi1
            .iter()
            .map(|p| {
                let d = INDICATOR_SMOOTHING;
                let s2 = p * p + d * d;
                INDICATOR_TOL * d * d / (s2 * s2.sqrt())
            })
            .collect(),
    }
}

/// Primal counterpart of the tube term in the indicator conjugate: finite on
/// the sup-norm tube `|rho1 - target| <= tol`, infinite outside. Used by the
/// duality-gap certificate so that the Fenchel-Young residual of the
/// indicator pair is exactly nonnegative.
pub fn indicator_tube_value(rho1: &[f64], target: &[f64], dx: f64) -> f64 {
    let tol = INDICATOR_TOL;
    let d = INDICATOR_SMOOTHING;
    let mut sum = 0.0;
    for (r, t) in rho1.iter().zip(target) {
        let y = (t - r) / tol;
        if y.abs() > 1.0 {
            return f64::INFINITY;
        }
        sum += tol * d * (1.0 - (1.0 - y * y).sqrt());
    }
    sum * dx
}

/// Self-financing feasibility: `(max(b,0))^2 <= nu^2 a`.
#[inline]
pub fn feasible_controls(b: f64, a: f64, nu: f64) -> bool {
    let bp = b.max(0.0);
    bp * bp <= nu * nu * a
}

/// Inverts the drift control to the portfolio weight `alpha = b / (mu x)`.
/// Nodes with `|x|` at or below [`WEIGHT_X_EPS`] are reported as `None`.
pub fn recover_portfolio_weight(
    b_field: &[f64],
    grid: &Grid,
    market: &MarketParams,
) -> Vec<Option<f64>> {
    (0..grid.m)
        .map(|i| {
            let x = grid.x(i);
            if x.abs() <= WEIGHT_X_EPS {
                None
            } else {
                Some(b_field[i] / (market.mu * x))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(0.0, 12.0, 241, 100).unwrap()
    }

    #[test]
    fn normal_peak_value() {
        let t = TargetDistribution::Normal { mean: 6.0, sd: 1.0 };
        assert_relative_eq!(t.pdf(6.0), 0.3989422804014327, max_relative = 1e-12);
    }

    #[test]
    fn mixture_symmetric_midpoint() {
        // 0.5 N(4,1) + 0.5 N(7,1) at x = 5.5: both components sit 1.5 sd away.
        let t = TargetDistribution::Mixture {
            components: vec![
                MixtureComponent { weight: 0.5, mean: 4.0, sd: 1.0 },
                MixtureComponent { weight: 0.5, mean: 7.0, sd: 1.0 },
            ],
        };
        assert_relative_eq!(t.pdf(5.5), normal_pdf(1.5, 0.0, 1.0), max_relative = 1e-12);
        assert_relative_eq!(t.pdf(5.5), 0.129517, max_relative = 1e-4);
    }

    #[test]
    fn weibull_at_scale() {
        let (k, s) = (6.0, 2.0);
        let t = TargetDistribution::Weibull { shape: k, scale: s };
        assert_relative_eq!(t.pdf(s), (k / s) * (-1.0_f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn target_density_normalized_and_nonnegative() {
        let g = grid();
        for t in [
            TargetDistribution::Normal { mean: 6.0, sd: 1.0 },
            TargetDistribution::Weibull { shape: 6.0, scale: 6.5 },
            TargetDistribution::Mixture {
                components: vec![
                    MixtureComponent { weight: 0.5, mean: 4.0, sd: 1.0 },
                    MixtureComponent { weight: 0.5, mean: 7.0, sd: 1.0 },
                ],
            },
        ] {
            let rho = target_density(&t, &g).unwrap();
            assert!(rho.iter().all(|v| *v >= 0.0));
            assert_relative_eq!(integrate(&rho, g.dx), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn target_density_rejects_truncated() {
        let g = grid();
        // Mass up to x=12 is tiny for a Normal centered at 20.
        let t = TargetDistribution::Normal { mean: 20.0, sd: 1.0 };
        assert!(matches!(
            target_density(&t, &g),
            Err(SolverError::DomainCoverage { .. })
        ));
    }

    #[test]
    fn point_mass_target() {
        let g = grid();
        let rho = target_density(&TargetDistribution::PointMass { location: 5.0 }, &g).unwrap();
        assert_relative_eq!(integrate(&rho, g.dx), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rho[g.nearest_node(5.0)], 1.0 / g.dx, max_relative = 1e-12);
    }

    #[test]
    fn penalty_zero_at_target() {
        let g = grid();
        let rho = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        for p in [
            PenaltySpec::SquaredL2 { lambda: 3.0 },
            PenaltySpec::KullbackLeibler { lambda: 3.0 },
            PenaltySpec::Indicator,
        ] {
            assert_eq!(penalty_value(&p, &rho, &rho, g.dx), 0.0);
        }
    }

    #[test]
    fn penalty_l2_constant_offset() {
        // lambda = 2, rho1 - target = c on a unit domain: C = c^2 * length.
        let g = Grid::new(0.0, 1.0, 101, 1).unwrap();
        let target = vec![1.0; g.m];
        let c = 0.3;
        let rho: Vec<f64> = target.iter().map(|t| t + c).collect();
        let got = penalty_value(&PenaltySpec::SquaredL2 { lambda: 2.0 }, &rho, &target, g.dx);
        // Rectangle rule over 101 nodes spans length 1.01.
        assert_relative_eq!(got, c * c * 1.01, max_relative = 1e-12);
    }

    #[test]
    fn penalty_kl_matches_gaussian_closed_form() {
        let g = Grid::new(-10.0, 22.0, 2001, 1).unwrap();
        let rho = target_density(&TargetDistribution::Normal { mean: 5.5, sd: 1.2 }, &g).unwrap();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let lambda = 2.5;
        let got = penalty_value(&PenaltySpec::KullbackLeibler { lambda }, &rho, &target, g.dx);
        // KL(N(m1,s1) || N(m2,s2)) closed form.
        let (m1, s1, m2, s2) = (5.5, 1.2, 6.0, 1.0);
        let kl = (s2 / s1 as f64).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
        assert_relative_eq!(got, lambda * kl, max_relative = 1e-3);
    }

    #[test]
    fn indicator_sentinel() {
        let g = grid();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let mut rho = target.clone();
        rho[10] += 1e-3;
        assert!(penalty_value(&PenaltySpec::Indicator, &rho, &target, g.dx).is_infinite());
    }

    #[test]
    fn conjugate_at_zero_potential() {
        let g = grid();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let phi1 = vec![0.0; g.m];
        let eval = conjugate(&PenaltySpec::SquaredL2 { lambda: 4.0 }, &phi1, &target, g.dx);
        assert_eq!(eval.value, 0.0);
        for (gi, ti) in eval.gradient.iter().zip(&target) {
            assert_relative_eq!(*gi, -ti, max_relative = 1e-14);
        }
    }

    #[test]
    fn conjugate_kl_unit_exponent() {
        // phi1 = -lambda makes the exponent zero, so the gradient is -target.
        let g = grid();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let lambda = 0.7;
        let phi1 = vec![-lambda; g.m];
        let eval = conjugate(&PenaltySpec::KullbackLeibler { lambda }, &phi1, &target, g.dx);
        assert!(!eval.clamped);
        for (gi, ti) in eval.gradient.iter().zip(&target) {
            assert_relative_eq!(*gi, -ti, max_relative = 1e-13);
        }
    }

    #[test]
    fn conjugate_kl_clamps_extreme_exponent() {
        let g = grid();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let phi1 = vec![-1e6; g.m];
        let eval = conjugate(&PenaltySpec::KullbackLeibler { lambda: 1.0 }, &phi1, &target, g.dx);
        assert!(eval.clamped);
        assert!(eval.value.is_finite());
    }

    #[test]
    fn conjugate_gradient_matches_finite_differences() {
        let g = Grid::new(0.0, 12.0, 61, 1).unwrap();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let phi1: Vec<f64> = (0..g.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-4;
        for penalty in [
            PenaltySpec::SquaredL2 { lambda: 2.0 },
            PenaltySpec::KullbackLeibler { lambda: 1.5 },
            PenaltySpec::Indicator,
        ] {
            let eval = conjugate(&penalty, &phi1, &target, g.dx);
            let gmax = eval.gradient.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * g.dx;
            for _ in 0..10 {
                let i = rng.gen_range(0..g.m);
                let mut up = phi1.clone();
                up[i] += eps;
                let mut dn = phi1.clone();
                dn[i] -= eps;
                let fd = (conjugate(&penalty, &up, &target, g.dx).value
                    - conjugate(&penalty, &dn, &target, g.dx).value)
                    / (2.0 * eps);
                // The functional derivative carries the quadrature weight dx.
                // Relative to the gradient scale; tiny entries are compared
                // against a floor of 1% of the largest one.
                let analytic = eval.gradient[i] * g.dx;
                let scale = analytic.abs().max(0.01 * gmax).max(1e-8);
                assert!(
                    (fd - analytic).abs() / scale < 1e-6,
                    "{penalty:?} node {i}: fd {fd:.3e} vs analytic {analytic:.3e}"
                );
            }
        }
    }

    #[test]
    fn fenchel_young_for_squared_l2() {
        let g = Grid::new(0.0, 12.0, 121, 1).unwrap();
        let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let penalty = PenaltySpec::SquaredL2 { lambda: 3.0 };
        for _ in 0..50 {
            let rho: Vec<f64> = (0..g.m).map(|_| rng.gen_range(0.0..0.6)).collect();
            let phi1: Vec<f64> = (0..g.m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lhs: f64 = rho.iter().zip(&phi1).map(|(r, p)| -p * r).sum::<f64>() * g.dx;
            let rhs = penalty_value(&penalty, &rho, &target, g.dx)
                + conjugate(&penalty, &phi1, &target, g.dx).value;
            assert!(lhs <= rhs + 1e-10);
        }
    }

    #[test]
    fn feasibility_predicate() {
        assert!(feasible_controls(0.2, 0.2, 1.0));
        assert!(!feasible_controls(0.5, 0.2, 1.0));
        assert!(feasible_controls(-5.0, 0.01, 1.0));
    }

    #[test]
    fn feasibility_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let b = rng.gen_range(0.0..2.0);
            let a = rng.gen_range(0.0..2.0);
            let nu = rng.gen_range(0.1..2.0);
            let c = rng.gen_range(0.1..4.0);
            assert_eq!(
                feasible_controls(b, a, nu),
                feasible_controls(c * b, c * c * a, nu)
            );
        }
    }

    #[test]
    fn portfolio_weight_inversion() {
        let g = grid();
        let market = MarketParams::scalar(0.1, 0.1).unwrap();
        let b = vec![0.2; g.m];
        let w = recover_portfolio_weight(&b, &g, &market);
        // x = 0 node is undefined.
        assert!(w[0].is_none());
        let i5 = g.nearest_node(5.0);
        assert_relative_eq!(w[i5].unwrap(), 0.4, max_relative = 1e-12);
        let zeros = vec![0.0; g.m];
        let w0 = recover_portfolio_weight(&zeros, &g, &market);
        assert_eq!(w0[i5].unwrap(), 0.0);
    }

    #[test]
    fn k_schedule_validation() {
        let bad = CostSpec::CashInputPiecewise {
            segments: vec![
                KSegment { t_start: 0.0, t_end: 0.6, k: 5.0 },
                KSegment { t_start: 0.5, t_end: 1.0, k: 0.1 },
            ],
            w: 0.01,
            l: 0.01,
            control_box: ControlBox::default(),
        };
        assert!(bad.validate().is_err());

        let good = CostSpec::CashInputPiecewise {
            segments: vec![
                KSegment { t_start: 0.0, t_end: 0.8, k: 5.0 },
                KSegment { t_start: 0.8, t_end: 1.0, k: 0.1 },
            ],
            w: 0.01,
            l: 0.01,
            control_box: ControlBox::default(),
        };
        good.validate().unwrap();
        if let StepCostKind::CashInput { k, .. } = good.at_time(0.85).kind {
            assert_eq!(k, 0.1);
        } else {
            panic!("wrong step cost kind");
        }
        if let StepCostKind::CashInput { k, .. } = good.at_time(0.0).kind {
            assert_eq!(k, 5.0);
        } else {
            panic!("wrong step cost kind");
        }
    }

    #[test]
    fn nu_schedule_lookup() {
        let market = MarketParams::with_schedule(0.1, 0.1, vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(market.nu_at(0), 1.0);
        assert_eq!(market.nu_at(2), 0.5);
        assert_eq!(market.nu_at(9), 0.5);
        let scalar = MarketParams::scalar(0.1, 0.1).unwrap();
        assert_relative_eq!(scalar.nu_at(3), 1.0, max_relative = 1e-15);
    }
}
