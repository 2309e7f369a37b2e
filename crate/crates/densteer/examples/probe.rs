use densteer::fokker_planck::initial_density;
use densteer::grid::Grid;
use densteer::hjb::HjbSettings;
use densteer::model::{
    target_density, ControlBox, CostSpec, MarketParams, PenaltySpec, TargetDistribution,
};
use densteer::optimizer::{fenchel_gap, optimize_from, Problem, SolveSettings};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let b_min: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(-20.0);
    let b_max: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20.0);
    let a_max: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6.0);
    let chunks: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let chunk_size: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(100);

    let grid = Grid::new(0.0, 12.0, 241, 100).unwrap();
    let market = MarketParams::scalar(0.1, 0.1).unwrap();
    let target = target_density(&TargetDistribution::Normal { mean: 6.0, sd: 1.0 }, &grid).unwrap();
    let rho0 = initial_density(5.0, &grid, 2.0).unwrap();
    let problem = Problem {
        grid: grid.clone(),
        market,
        cost: CostSpec::QuadraticShift {
            a_center: 0.2,
            b_center: 0.2,
            control_box: ControlBox { a_max, b_min, b_max, a_min_slope: Some(grid.dx) },
        },
        penalty: PenaltySpec::Indicator,
        target,
        rho0,
    };
    let settings = SolveSettings {
        grad_tol: 1e-10,
        max_outer_iter: chunk_size,
        lbfgs_memory: std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(10),
        newton_refine: true,
        newton_switch_tol: std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(3e-4),
        gap_stop: Some(5e-7),
        hjb: HjbSettings { fp_tol: 1e-12, fp_max_iter: 200 },
        ..SolveSettings::default()
    };
    let t0 = Instant::now();
    let mut x = vec![0.0; grid.m];
    for chunk in 0..chunks {
        let report = optimize_from(&problem, &settings, x.clone()).unwrap();
        x = report.phi1_opt.clone();
        let cert = fenchel_gap(&problem.penalty, &x, &report.rho1_dual, &problem.target, grid.dx);
        let phimin = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let phimax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "it {:4} V~ {:.9} |g| {:.2e} cert {:+.2e} phi [{:.2},{:.2}] minrho {:.1e} drift {:.1e} L2 {:.2e} L2d {:.2e} gap {:+.2e} {:?} t={:.0}s",
            (chunk + 1) * chunk_size,
            report.v_tilde,
            report.grad_inf,
            cert,
            phimin,
            phimax,
            report.rho_trajectory.min_density,
            report.rho_trajectory.mass_drift,
            report.l2_distance,
            report.l2_distance_dual,
            report.duality_gap,
            report.termination,
            t0.elapsed().as_secs_f64()
        );
        if chunk == chunks - 1 || report.grad_inf < 1e-10 {
            // Mismatch profile: largest |rho1_dual - target| nodes.
            let mut mism: Vec<(f64, usize)> = report
                .rho1_dual
                .iter()
                .zip(&problem.target)
                .enumerate()
                .map(|(i, (r, t))| ((r - t).abs(), i))
                .collect();
            mism.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (d, i) in mism.iter().take(8) {
                println!(
                    "  mismatch {:.2e} at x={:.2} (target {:.2e}, phi {:.2})",
                    d, grid.x(*i), problem.target[*i], x[*i]
                );
            }
        }
        if report.grad_inf < 1e-10 {
            break;
        }
    }
}
