//! Uniform time/space grid, discrete derivatives, tridiagonal solves and
//! quadrature shared by the HJB and Fokker-Planck solvers.
//!
//! Conventions fixed here and used everywhere else:
//! - space nodes `x_i = x_min + i*dx`, `i = 0..m-1`, `dx = (x_max-x_min)/(m-1)`
//! - time levels `t_n = n*dt`, `n = 0..n_steps`, `dt = 1/n_steps` (horizon 1)
//! - first derivative: central in the interior, one-sided at the two ends
//! - second difference: standard 3-point in the interior, zero at the ends
//!   (linear extrapolation)
//! - quadrature: rectangle rule `sum_i f_i * dx` over all nodes

use crate::error::{Result, SolverError};

/// Uniform discretization of `[x_min, x_max] x [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    /// Space node count.
    pub m: usize,
    /// Time step count (there are `n_steps + 1` time levels).
    pub n_steps: usize,
    pub dx: f64,
    pub dt: f64,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, m: usize, n_steps: usize) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(SolverError::InvalidGrid("bounds must be finite".into()));
        }
        if x_min >= x_max {
            return Err(SolverError::InvalidGrid(format!(
                "empty interval [{x_min}, {x_max}]"
            )));
        }
        if m < 3 {
            return Err(SolverError::InvalidGrid(format!(
                "need at least 3 space nodes, got {m}"
            )));
        }
        if n_steps < 1 {
            return Err(SolverError::InvalidGrid("need at least 1 time step".into()));
        }
        Ok(Grid {
            x_min,
            x_max,
            m,
            n_steps,
            dx: (x_max - x_min) / (m - 1) as f64,
            dt: 1.0 / n_steps as f64,
        })
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    #[inline]
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.x(i)).collect()
    }

    /// Index of the node closest to `x`.
    pub fn nearest_node(&self, x: f64) -> usize {
        let i = ((x - self.x_min) / self.dx).round() as isize;
        i.clamp(0, self.m as isize - 1) as usize
    }
}

/// Thomas algorithm for `lower_i * y_{i-1} + diag_i * y_i + upper_i * y_{i+1} = rhs_i`.
///
/// `lower` and `upper` have length `n - 1`: `lower[i]` multiplies `y_i` in row
/// `i + 1`, `upper[i]` multiplies `y_{i+1}` in row `i`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    assert_eq!(rhs.len(), n, "rhs length mismatch");
    assert_eq!(lower.len(), n - 1, "lower band length mismatch");
    assert_eq!(upper.len(), n - 1, "upper band length mismatch");

    let mut c_star = vec![0.0; n - 1];
    let mut d_star = vec![0.0; n];
    let pivot_floor = 1e-14;

    let mut pivot = diag[0];
    if pivot.abs() < pivot_floor {
        return Err(SolverError::SingularSystem { row: 0, pivot });
    }
    c_star[0] = upper[0] / pivot;
    d_star[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i - 1] * c_star[i - 1];
        if pivot.abs() < pivot_floor {
            return Err(SolverError::SingularSystem { row: i, pivot });
        }
        if i < n - 1 {
            c_star[i] = upper[i] / pivot;
        }
        d_star[i] = (rhs[i] - lower[i - 1] * d_star[i - 1]) / pivot;
    }

    let mut y = d_star;
    for i in (0..n - 1).rev() {
        y[i] -= c_star[i] * y[i + 1];
    }
    Ok(y)
}

/// Solves the transposed system `T^t y = rhs` for the tridiagonal `T` given by
/// `(lower, diag, upper)`. The transpose just swaps the two off-diagonal bands.
pub fn solve_tridiagonal_transposed(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    solve_tridiagonal(upper, diag, lower, rhs)
}

/// First spatial derivative: central in the interior, one-sided at the ends.
pub fn central_first_derivative(field: &[f64], dx: f64) -> Vec<f64> {
    let m = field.len();
    assert!(m >= 3, "need at least 3 nodes");
    let mut out = vec![0.0; m];
    out[0] = (field[1] - field[0]) / dx;
    for i in 1..m - 1 {
        out[i] = (field[i + 1] - field[i - 1]) / (2.0 * dx);
    }
    out[m - 1] = (field[m - 1] - field[m - 2]) / dx;
    out
}

/// Second difference `(f_{i+1} - 2 f_i + f_{i-1}) / dx^2`, zero at the ends.
pub fn second_difference(field: &[f64], dx: f64) -> Vec<f64> {
    let m = field.len();
    assert!(m >= 3, "need at least 3 nodes");
    let mut out = vec![0.0; m];
    let dx2 = dx * dx;
    for i in 1..m - 1 {
        out[i] = (field[i + 1] - 2.0 * field[i] + field[i - 1]) / dx2;
    }
    out
}

/// Rectangle rule over all nodes.
#[inline]
pub fn integrate(field: &[f64], dx: f64) -> f64 {
    field.iter().sum::<f64>() * dx
}

/// Rectangle-rule inner product `sum_i f_i g_i dx`.
#[inline]
pub fn inner(f: &[f64], g: &[f64], dx: f64) -> f64 {
    debug_assert_eq!(f.len(), g.len());
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * dx
}

/// Discrete L2 norm `sqrt(sum_i f_i^2 dx)`.
pub fn norm_l2(f: &[f64], dx: f64) -> f64 {
    (f.iter().map(|v| v * v).sum::<f64>() * dx).sqrt()
}

pub fn norm_inf(f: &[f64]) -> f64 {
    f.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_reference_configuration() {
        let g = Grid::new(0.0, 12.0, 241, 100).unwrap();
        assert_relative_eq!(g.dx, 0.05, max_relative = 1e-15);
        assert_relative_eq!(g.dt, 0.01, max_relative = 1e-15);
        assert_relative_eq!(g.x(240), 12.0, max_relative = 1e-12);
    }

    #[test]
    fn grid_three_nodes() {
        let g = Grid::new(0.0, 1.0, 3, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(Grid::new(5.0, 5.0, 10, 10).is_err());
        assert!(Grid::new(0.0, f64::NAN, 10, 10).is_err());
        assert!(Grid::new(0.0, 1.0, 2, 10).is_err());
        assert!(Grid::new(0.0, 1.0, 10, 0).is_err());
    }

    #[test]
    fn tridiagonal_identity() {
        let rhs = vec![1.0, -2.0, 3.0, 0.5];
        let y = solve_tridiagonal(&[0.0; 3], &[1.0; 4], &[0.0; 3], &rhs).unwrap();
        assert_eq!(y, rhs);
    }

    #[test]
    fn tridiagonal_two_by_two() {
        // diag (2,2), off-diagonals 1, rhs (3,3) -> (1,1)
        let y = solve_tridiagonal(&[1.0], &[2.0, 2.0], &[1.0], &[3.0, 3.0]).unwrap();
        assert_relative_eq!(y[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(y[1], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn tridiagonal_singular_pivot() {
        let err = solve_tridiagonal(&[1.0], &[0.0, 1.0], &[1.0], &[1.0, 1.0]);
        assert!(matches!(err, Err(SolverError::SingularSystem { row: 0, .. })));
    }

    /// Dense Gaussian elimination with partial pivoting; the independent oracle
    /// for the banded solver.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut s = b[row];
            for k in row + 1..n {
                s -= a[row][k] * x[k];
            }
            x[row] = s / a[row][row];
        }
        x
    }

    #[test]
    fn tridiagonal_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 5;
            let lower: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upper: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Diagonally dominant diagonal.
            let diag: Vec<f64> = (0..n)
                .map(|i| {
                    let mut d = 2.5 + rng.gen_range(0.0..1.0);
                    if rng.gen_bool(0.5) {
                        d = -d;
                    }
                    let _ = i;
                    d
                })
                .collect();
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                dense[i][i] = diag[i];
                if i > 0 {
                    dense[i][i - 1] = lower[i - 1];
                }
                if i < n - 1 {
                    dense[i][i + 1] = upper[i];
                }
            }
            let expect = dense_solve(dense, rhs.clone());
            let got = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
            for (g, e) in got.iter().zip(&expect) {
                assert_relative_eq!(g, e, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tridiagonal_residual_reconstructs_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let lower: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upper: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let diag: Vec<f64> = (0..n).map(|_| 3.0 + rng.gen_range(0.0..1.0)).collect();
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
            let scale = norm_inf(&rhs).max(1.0);
            for i in 0..n {
                let mut lhs = diag[i] * y[i];
                if i > 0 {
                    lhs += lower[i - 1] * y[i - 1];
                }
                if i < n - 1 {
                    lhs += upper[i] * y[i + 1];
                }
                assert!((lhs - rhs[i]).abs() / scale < 1e-10);
            }
        }
    }

    #[test]
    fn transposed_solve_matches_dense_transpose() {
        let lower = vec![0.3, -0.2, 0.1];
        let diag = vec![2.0, -3.0, 2.5, 4.0];
        let upper = vec![-0.4, 0.6, 0.2];
        let rhs = vec![1.0, 0.0, -1.0, 2.0];
        let y = solve_tridiagonal_transposed(&lower, &diag, &upper, &rhs).unwrap();
        // T^t y = rhs means column-form residuals of T.
        let n = 4;
        for j in 0..n {
            let mut lhs = diag[j] * y[j];
            if j > 0 {
                lhs += upper[j - 1] * y[j - 1];
            }
            if j < n - 1 {
                lhs += lower[j] * y[j + 1];
            }
            assert_relative_eq!(lhs, rhs[j], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivatives_on_linear_field() {
        let g = Grid::new(0.0, 1.0, 11, 1).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| 3.0 * x).collect();
        let d1 = central_first_derivative(&f, g.dx);
        let d2 = second_difference(&f, g.dx);
        for v in &d1 {
            assert_relative_eq!(*v, 3.0, max_relative = 1e-12);
        }
        for v in &d2 {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn derivatives_on_constant_field() {
        let f = vec![4.2; 9];
        assert!(central_first_derivative(&f, 0.1).iter().all(|v| v.abs() < 1e-14));
        assert!(second_difference(&f, 0.1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_difference_quadratic_exact() {
        let g = Grid::new(0.0, 1.0, 11, 1).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| x * x).collect();
        let d2 = second_difference(&f, g.dx);
        for v in &d2[1..10] {
            assert_relative_eq!(*v, 2.0, max_relative = 1e-10);
        }
        assert_eq!(d2[0], 0.0);
        assert_eq!(d2[10], 0.0);
    }

    #[test]
    fn derivative_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = central_first_derivative(&combo, 0.1);
        let df = central_first_derivative(&f, 0.1);
        let dg = central_first_derivative(&g, 0.1);
        for i in 0..17 {
            assert_relative_eq!(lhs[i], a * df[i] + b * dg[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn integrate_rectangle_rule() {
        // f = 1 on [0,1] with 11 nodes: rectangle rule over all nodes gives 1.1.
        let f = vec![1.0; 11];
        assert_relative_eq!(integrate(&f, 0.1), 1.1, max_relative = 1e-14);
        assert_eq!(integrate(&[0.0; 5], 0.1), 0.0);
    }

    #[test]
    fn integrate_monotone() {
        let f = vec![0.2, 0.0, 3.0, 1.0];
        assert!(integrate(&f, 0.25) >= 0.0);
    }
}
