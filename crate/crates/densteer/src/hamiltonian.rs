//! Pointwise maximization of the Hamiltonian over admissible controls.
//!
//! At each grid node the backward solver needs
//!
//! ```text
//! F*(p, q) = max_{(b,a) admissible} { p b + q a - F(b, a) }
//! ```
//!
//! with `p` the first and `q` half the second spatial derivative of the dual
//! potential. The admissible set is the control box intersected with the
//! feasibility cone `(b^+)^2 <= nu^2 a` for the quadratic-shift cost, and the
//! box alone for the cash-input cost. Both costs are piecewise quadratic, so
//! the maximizer is found exactly by enumerating stationary points of each
//! piece, the first-order roots along the cone arc (a depressed cubic), and
//! the box edges.

use crate::error::{Result, SolverError};
use crate::model::{StepCost, StepCostKind};

/// Maximizer of the Hamiltonian at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlChoice {
    pub b: f64,
    pub a: f64,
    pub value: f64,
}

/// Real roots of the depressed cubic `t^3 + p t + q = 0`, ascending.
///
/// Closed form (trigonometric for three real roots, Cardano otherwise) with a
/// Newton polish; a sign-change scan backs it up when the coefficients are
/// nearly degenerate.
pub fn depressed_cubic_roots(p: f64, q: f64) -> Vec<f64> {
    let eval = |t: f64| t * t * t + p * t + q;
    let polish = |mut t: f64| {
        for _ in 0..3 {
            let f = eval(t);
            let df = 3.0 * t * t + p;
            if df.abs() > 1e-300 {
                let step = f / df;
                if step.is_finite() {
                    t -= step;
                }
            }
        }
        t
    };

    let mut roots: Vec<f64> = if p == 0.0 && q == 0.0 {
        vec![0.0]
    } else {
        let disc = -4.0 * p * p * p - 27.0 * q * q;
        if disc > 0.0 {
            // Three distinct real roots; p < 0 here.
            let r = 2.0 * (-p / 3.0).sqrt();
            let arg = (3.0 * q / (2.0 * p)) * (-3.0 / p).sqrt();
            let theta = arg.clamp(-1.0, 1.0).acos();
            (0..3)
                .map(|k| {
                    polish(r * ((theta - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos())
                })
                .collect()
        } else {
            // Single real root (or a repeated pair on the boundary disc = 0).
            let d = (q * q / 4.0 + p * p * p / 27.0).max(0.0).sqrt();
            let u = if q >= 0.0 { -q / 2.0 - d } else { -q / 2.0 + d };
            let w = u.cbrt();
            let root = if w.abs() > 1e-300 { w - p / (3.0 * w) } else { (-q).cbrt() };
            let mut rs = vec![polish(root)];
            if disc == 0.0 && p != 0.0 {
                // Boundary case: a simple root plus a double root at -root/2.
                rs.push(-rs[0] / 2.0);
            }
            rs
        }
    };

    // Scan fallback: if a polished root still has a large residual the
    // closed form has degraded; recover brackets by scanning.
    let scale = 1.0 + p.abs() + q.abs();
    if roots.iter().any(|t| !t.is_finite() || eval(*t).abs() > 1e-8 * scale) {
        roots.clear();
        let bound = 2.0 * (1.0 + p.abs().sqrt() + q.abs().cbrt());
        let steps = 4000;
        let mut prev_t = -bound;
        let mut prev_f = eval(prev_t);
        for k in 1..=steps {
            let t = -bound + 2.0 * bound * k as f64 / steps as f64;
            let f = eval(t);
            if prev_f == 0.0 {
                roots.push(prev_t);
            } else if prev_f * f < 0.0 {
                let (mut lo, mut hi) = (prev_t, t);
                let (mut flo, _) = (prev_f, f);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    let fm = eval(mid);
                    if flo * fm <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            prev_t = t;
            prev_f = f;
        }
        if roots.is_empty() {
            roots.push(polish(0.0));
        }
    }

    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + a.abs()));
    roots
}

/// Smallest admissible diffusion for drift `b`: the larger of the financing
/// cone `(b^+)^2 / nu^2` (when it applies) and the stability cone
/// `slope * |b|`, nudged upward so both exact predicates hold despite
/// rounding.
fn floor_diffusion(b: f64, nu: f64, cone: bool, slope: f64) -> f64 {
    let bp = b.max(0.0);
    let nu2 = nu * nu;
    let mut a = slope * b.abs();
    if cone && bp > 0.0 && nu > 0.0 {
        a = a.max(bp * bp / nu2);
    }
    while a < slope * b.abs() || (cone && nu > 0.0 && bp * bp > nu2 * a) {
        a = a.next_up();
    }
    a
}

/// Largest drift (of the given sign) whose floor diffusion still fits under
/// `a_cap`, also capped by `b_cap`. Guards edge candidates against rounding
/// pushing them outside the box.
fn max_drift_under(nu: f64, cone: bool, slope: f64, a_cap: f64, b_cap: f64) -> f64 {
    let mut b = b_cap;
    if cone && nu > 0.0 {
        b = b.min(nu * a_cap.sqrt());
    }
    if slope > 0.0 {
        b = b.min(a_cap / slope);
    }
    b = b.max(0.0);
    while b > 0.0 && floor_diffusion(b, nu, cone, slope) > a_cap {
        b = b.next_down();
    }
    b
}

/// Stationary point of `b -> p b + q (s b) - F(b, s b)` for a quadratic piece
/// `F(b, a) = ca (a - a0)^2 + cb (b - b0)^2 + k0 b^2 + k1 a + const`, i.e. the
/// restriction of a quadratic cost to the line `a = s b`.
#[allow(clippy::too_many_arguments)]
fn line_stationary(p: f64, q: f64, s: f64, ca: f64, a0: f64, cb: f64, b0: f64, k0: f64, k1: f64) -> f64 {
    // d/db [ p b + q s b - ca (s b - a0)^2 - cb (b - b0)^2 - k0 b^2 - k1 s b ]
    //   = p + q s + 2 ca s a0 + 2 cb b0 - k1 s - 2 (ca s^2 + cb + k0) b
    let denom = 2.0 * (ca * s * s + cb + k0);
    if denom <= 0.0 {
        return 0.0;
    }
    (p + q * s + 2.0 * ca * s * a0 + 2.0 * cb * b0 - k1 * s) / denom
}

struct CandidateSet<'c> {
    cost: &'c StepCost,
    nu: f64,
    p: f64,
    q: f64,
    best: Vec<ControlChoice>,
}

impl<'c> CandidateSet<'c> {
    fn gain(&self, b: f64, a: f64) -> f64 {
        self.p * b + self.q * a - self.cost.running_cost(b, a, self.nu)
    }

    fn push(&mut self, b: f64, a: f64) {
        let bx = self.cost.control_box;
        if !(b.is_finite() && a.is_finite()) {
            return;
        }
        if b < bx.b_min || b > bx.b_max || a < 0.0 || a > bx.a_max {
            return;
        }
        if a < bx.slope() * b.abs() {
            return;
        }
        if self.cost.cone_constrained() {
            let bp = b.max(0.0);
            if bp * bp > self.nu * self.nu * a {
                return;
            }
        }
        self.best.push(ControlChoice { b, a, value: self.gain(b, a) });
    }

    /// Pushes `(b, a)` with the diffusion raised onto the admissible floor.
    fn push_floored(&mut self, b: f64, a: f64) {
        let floor = floor_diffusion(b, self.nu, self.cost.cone_constrained(), self.cost.control_box.slope());
        self.push(b, a.max(floor));
    }

    /// Winner with deterministic tie-breaking: near-equal values prefer the
    /// smaller diffusion, then the smaller absolute drift.
    fn select(self) -> Result<ControlChoice> {
        let top = self
            .best
            .iter()
            .map(|c| c.value)
            .fold(f64::NEG_INFINITY, f64::max);
        self.best
            .into_iter()
            .filter(|c| c.value >= top - 1e-12)
            .min_by(|x, y| x.a.total_cmp(&y.a).then(x.b.abs().total_cmp(&y.b.abs())))
            .ok_or(SolverError::EmptyControlSet)
    }
}

/// Argmax of `p b + q a - F(b, a)` over the admissible set, together with the
/// attained value `F*(p, q)`.
pub fn maximize_hamiltonian(p: f64, q: f64, nu: f64, cost: &StepCost) -> Result<ControlChoice> {
    let bx = cost.control_box;
    let mut set = CandidateSet { cost, nu, p, q, best: Vec::with_capacity(16) };

    match cost.kind {
        StepCostKind::QuadraticShift { a_center, b_center } => {
            let b0 = b_center + p / 2.0;
            let a0 = a_center + q / 2.0;
            let nu2 = nu * nu;
            let slope = bx.slope();
            // Largest |b| the stability cone admits under a_max.
            let b_stab_cap = if slope > 0.0 { bx.a_max / slope } else { f64::INFINITY };

            // Interior stationary point.
            set.push(b0, a0);

            // Max over the b <= 0 strip of the box (the financing cone never
            // binds there): the coordinatewise optimum if it clears the
            // stability cone, else the stability edge a = -slope b.
            let neg_hi = bx.b_max.min(0.0);
            let neg_lo = bx.b_min.max(-b_stab_cap);
            if bx.b_min <= neg_hi {
                set.push(b0.clamp(bx.b_min, neg_hi), a0.clamp(0.0, bx.a_max));
                if slope > 0.0 && neg_lo <= neg_hi {
                    let s = -slope;
                    let b_line =
                        line_stationary(p, q, s, 1.0, a_center, 1.0, b_center, 0.0, 0.0);
                    for b in [b_line.clamp(neg_lo, neg_hi), neg_lo, neg_hi] {
                        set.push_floored(b, slope * b.abs());
                    }
                }
            }

            if nu > 0.0 {
                // Financing cone arc a = b^2 / nu^2; it dominates the
                // stability cone only beyond b = slope nu^2.
                let arc_hi = max_drift_under(nu, true, slope, bx.a_max, bx.b_max);
                let arc_lo = bx.b_min.max(slope * nu2);
                if arc_lo <= arc_hi {
                    set.push_floored(arc_lo, 0.0);
                    set.push_floored(arc_hi, 0.0);
                    // First-order condition along the arc reduces to a
                    // depressed cubic in b.
                    let pc = -nu2 * (q + 2.0 * a_center - nu2) / 2.0;
                    let qc = -nu2 * nu2 * (p + 2.0 * b_center) / 4.0;
                    for r in depressed_cubic_roots(pc, qc) {
                        if r > arc_lo && r < arc_hi {
                            set.push_floored(r, 0.0);
                        }
                    }
                }
                // Stability segment a = slope b for 0 <= b <= slope nu^2,
                // where it lies above the financing cone.
                if slope > 0.0 {
                    let seg_hi = (slope * nu2).min(bx.b_max).min(b_stab_cap);
                    let seg_lo = bx.b_min.max(0.0);
                    if seg_lo <= seg_hi {
                        let b_line =
                            line_stationary(p, q, slope, 1.0, a_center, 1.0, b_center, 0.0, 0.0);
                        for b in [b_line.clamp(seg_lo, seg_hi), seg_lo, seg_hi] {
                            set.push_floored(b, 0.0);
                        }
                    }
                }
                // a = a_max edge.
                let edge_hi = max_drift_under(nu, true, slope, bx.a_max, bx.b_max);
                let edge_lo = bx.b_min.max(-b_stab_cap);
                if edge_lo <= edge_hi {
                    set.push(b0.clamp(edge_lo, edge_hi), bx.a_max);
                    set.push(edge_lo, bx.a_max);
                }
                // b = b_max edge above both cones.
                if bx.b_max >= 0.0 {
                    let a_lo = floor_diffusion(bx.b_max, nu, true, slope);
                    if a_lo <= bx.a_max {
                        set.push(bx.b_max, a0.clamp(a_lo, bx.a_max));
                    }
                }
                // b = b_min edge.
                let a_lo = floor_diffusion(bx.b_min, nu, true, slope);
                if a_lo <= bx.a_max {
                    set.push(bx.b_min, a0.clamp(a_lo, bx.a_max));
                }
            } else {
                // nu = 0 collapses the financing cone to b <= 0; keep the
                // a_max edge corner of the strip.
                if bx.b_min <= neg_hi {
                    set.push(b0.clamp(neg_lo.max(bx.b_min), neg_hi), bx.a_max);
                }
            }
        }
        StepCostKind::CashInput { k, w, l } => {
            let nu2 = nu * nu;
            let s_max = bx.a_max.sqrt();
            let slope = bx.slope();
            let b_stab_cap = if slope > 0.0 { bx.a_max / slope } else { f64::INFINITY };

            // Negative-drift region: coordinatewise optimum plus the
            // stability edge a = -slope b.
            let neg_hi = bx.b_max.min(0.0);
            let neg_lo = bx.b_min.max(-b_stab_cap);
            if bx.b_min <= neg_hi {
                set.push(
                    (p / (2.0 * l)).clamp(bx.b_min, neg_hi),
                    (q / (2.0 * w)).clamp(0.0, bx.a_max),
                );
                set.push(neg_lo.max(bx.b_min), bx.a_max);
                if slope > 0.0 && neg_lo <= neg_hi {
                    let b_line = line_stationary(p, q, -slope, w, 0.0, 0.0, 0.0, l, 0.0);
                    for b in [b_line.clamp(neg_lo, neg_hi), neg_lo, neg_hi] {
                        set.push_floored(b, 0.0);
                    }
                }
            }

            if bx.b_max >= 0.0 {
                // Boundary line b = 0 between the middle and negative pieces.
                set.push(0.0, (q / (2.0 * w)).clamp(0.0, bx.a_max));
                set.push(0.0, bx.a_max);
                set.push(0.0, 0.0);

                // Cash-input region stationary point, valid strictly beyond
                // the financing cone (the stability check is in push).
                let b1 = p / (2.0 * k);
                let a1 = (q + k * nu2) / (2.0 * w);
                if b1 > 0.0 && a1 >= 0.0 && b1 * b1 > nu2 * a1 {
                    set.push(b1, a1);
                }

                // Stability edge a = slope b, split at the financing cone
                // crossing b = slope nu^2 into a flat-cost and a cash-input
                // piece.
                if slope > 0.0 {
                    let lo = bx.b_min.max(0.0);
                    let hi = bx.b_max.min(b_stab_cap);
                    let split = (slope * nu2).clamp(lo, hi);
                    if lo <= hi {
                        let b_mid = line_stationary(p, q, slope, w, 0.0, 0.0, 0.0, 0.0, 0.0);
                        for b in [b_mid.clamp(lo, split), lo, split] {
                            set.push_floored(b, 0.0);
                        }
                        let b_inp =
                            line_stationary(p, q, slope, w, 0.0, 0.0, 0.0, k, -k * nu2);
                        for b in [b_inp.clamp(split, hi), split, hi] {
                            set.push_floored(b, 0.0);
                        }
                    }
                }

                if nu > 0.0 {
                    // Arc b = nu sqrt(a): substituting s = sqrt(a) gives a
                    // depressed cubic 4 w s^3 - 2 q s - p nu = 0. The arc
                    // clears the stability cone for s >= slope nu.
                    let s_lo = slope * nu;
                    let s_hi = s_max.min(bx.b_max / nu);
                    if s_lo <= s_hi {
                        set.push_floored(nu * s_hi, s_hi * s_hi);
                        set.push_floored(nu * s_lo, s_lo * s_lo);
                        for s in depressed_cubic_roots(-q / (2.0 * w), -p * nu / (4.0 * w)) {
                            if s > s_lo && s < s_hi {
                                set.push_floored(nu * s, s * s);
                            }
                        }
                    }
                    // a = a_max edge, split by the region boundary.
                    let b_split = nu * s_max;
                    let edge_hi = bx.b_max.min(b_stab_cap);
                    set.push(b_split.min(edge_hi), bx.a_max);
                    if edge_hi > b_split {
                        set.push((p / (2.0 * k)).clamp(b_split, edge_hi), bx.a_max);
                    }
                    // b = b_max edge, split into the two pieces.
                    let edge_floor = floor_diffusion(bx.b_max, nu, false, slope);
                    if edge_floor <= bx.a_max {
                        let a_split = (bx.b_max * bx.b_max / nu2).clamp(edge_floor, bx.a_max);
                        set.push(bx.b_max, ((q + k * nu2) / (2.0 * w)).clamp(edge_floor, a_split));
                        set.push(bx.b_max, (q / (2.0 * w)).clamp(a_split, bx.a_max));
                    }
                    // b = b_min edge when the box excludes b <= 0.
                    if bx.b_min > 0.0 {
                        let edge_floor = floor_diffusion(bx.b_min, nu, false, slope);
                        if edge_floor <= bx.a_max {
                            let a_split = (bx.b_min * bx.b_min / nu2).clamp(edge_floor, bx.a_max);
                            set.push(
                                bx.b_min,
                                ((q + k * nu2) / (2.0 * w)).clamp(edge_floor, a_split),
                            );
                            set.push(bx.b_min, (q / (2.0 * w)).clamp(a_split, bx.a_max));
                        }
                        set.push_floored((p / (2.0 * k)).clamp(bx.b_min, bx.b_max), 0.0);
                    }
                } else {
                    // nu = 0: everything with b > 0 is cash input.
                    let b_lo = bx.b_min.max(0.0);
                    let edge_hi = bx.b_max.min(b_stab_cap);
                    set.push((p / (2.0 * k)).clamp(b_lo, edge_hi), bx.a_max);
                    for b in [edge_hi, b_lo] {
                        let floor = floor_diffusion(b, nu, false, slope);
                        if floor <= bx.a_max {
                            set.push(b, ((q + k * nu2) / (2.0 * w)).clamp(floor, bx.a_max));
                        }
                    }
                }
                // a = 0 edge with positive drift (collapses to b = 0 when the
                // stability cone is active).
                if slope == 0.0 {
                    set.push((p / (2.0 * k)).clamp(bx.b_min.max(0.0), bx.b_max), 0.0);
                    set.push(bx.b_max, 0.0);
                }
            }
        }
    }

    set.select()
}

/// Convex conjugate of the running cost: the value component of the argmax.
pub fn conjugate_f(p: f64, q: f64, nu: f64, cost: &StepCost) -> Result<f64> {
    maximize_hamiltonian(p, q, nu, cost).map(|c| c.value)
}
