//! Experiment orchestration: single runs, parameter sweeps, and the on-disk
//! artifact set (CSV tables plus a JSON report).
//!
//! Every CSV starts with the schema line `# densteer-schema v1`. All solver
//! inputs are echoed back to `config_echo.toml` with defaults materialized,
//! and reruns of the same config byte-reproduce every CSV.

use crate::config::{CostConfig, ExperimentConfig, PenaltyConfig};
use crate::error::{Result, SolverError};
use crate::fokker_planck::FpTrajectory;
use crate::model::KSegment;
use crate::montecarlo::{ks_distance, simulate_paths};
use crate::optimizer::{optimize, SolveReport, TerminationReason};
use crate::parallel::map_indexed;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const CSV_SCHEMA: &str = "# densteer-schema v1";

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub n_paths: usize,
    pub seed: u64,
    pub ks_distance: f64,
    pub mean_terminal_wealth: f64,
    pub mean_saving: f64,
    pub saving_se: f64,
    pub mean_input: f64,
    pub clamp_fraction: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: SolveReport,
    pub mc: Option<McSummary>,
    pub out_dir: PathBuf,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn density_columns(report: &SolveReport) -> (Option<&FpTrajectory>, Option<&FpTrajectory>) {
    (report.p_trajectory.as_ref(), report.q_trajectory.as_ref())
}

fn write_terminal_densities(
    dir: &Path,
    report: &SolveReport,
    target: &[f64],
    grid: &crate::grid::Grid,
) -> Result<()> {
    let (p, q) = density_columns(report);
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_SCHEMA}");
    let mut header = String::from("x,rho1,target");
    if p.is_some() {
        header.push_str(",p1");
    }
    if q.is_some() {
        header.push_str(",q1");
    }
    let _ = writeln!(out, "{header}");
    let rho1 = report.rho_trajectory.terminal();
    for i in 0..grid.m {
        let mut line = format!("{},{},{}", fmt(grid.x(i)), fmt(rho1[i]), fmt(target[i]));
        if let Some(p) = p {
            let _ = write!(line, ",{}", fmt(p.terminal()[i]));
        }
        if let Some(q) = q {
            let _ = write!(line, ",{}", fmt(q.terminal()[i]));
        }
        let _ = writeln!(out, "{line}");
    }
    write_file(&dir.join("terminal_densities.csv"), &out)
}

fn write_snapshots(
    dir: &Path,
    report: &SolveReport,
    grid: &crate::grid::Grid,
    stride: usize,
) -> Result<()> {
    let snap_dir = dir.join("density_snapshots");
    fs::create_dir_all(&snap_dir)?;
    let (p, q) = density_columns(report);
    let mut n = 0;
    while n <= grid.n_steps {
        let mut out = String::new();
        let _ = writeln!(out, "{CSV_SCHEMA}");
        let mut header = String::from("t,x,rho");
        if p.is_some() {
            header.push_str(",p");
        }
        if q.is_some() {
            header.push_str(",q");
        }
        let _ = writeln!(out, "{header}");
        let t = grid.t(n);
        for i in 0..grid.m {
            let mut line = format!(
                "{},{},{}",
                fmt(t),
                fmt(grid.x(i)),
                fmt(report.rho_trajectory.slices[n][i])
            );
            if let Some(p) = p {
                let _ = write!(line, ",{}", fmt(p.slices[n][i]));
            }
            if let Some(q) = q {
                let _ = write!(line, ",{}", fmt(q.slices[n][i]));
            }
            let _ = writeln!(out, "{line}");
        }
        write_file(&snap_dir.join(format!("snapshot_{n:04}.csv")), &out)?;
        if n == grid.n_steps {
            break;
        }
        n = (n + stride).min(grid.n_steps);
    }
    Ok(())
}

fn write_controls(dir: &Path, report: &SolveReport, grid: &crate::grid::Grid) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_SCHEMA}");
    let _ = writeln!(out, "t,x,B_star,A_star");
    for n in 0..grid.n_steps {
        let t = grid.t(n);
        for i in 0..grid.m {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt(t),
                fmt(grid.x(i)),
                fmt(report.controls.b[n][i]),
                fmt(report.controls.a[n][i])
            );
        }
    }
    write_file(&dir.join("controls.csv"), &out)
}

fn write_convergence(dir: &Path, report: &SolveReport) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_SCHEMA}");
    let _ = writeln!(out, "iter,V_tilde,grad_inf_norm,step");
    for rec in &report.iterations {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            rec.iter,
            fmt(rec.v_tilde),
            fmt(rec.grad_inf),
            fmt(rec.step)
        );
    }
    write_file(&dir.join("convergence.csv"), &out)
}

#[derive(Serialize)]
struct ReportJson<'r> {
    dual_value: f64,
    v_tilde: f64,
    /// `None` when the indicator sentinel makes the primal cost infinite.
    primal_cost: Option<f64>,
    duality_gap: Option<f64>,
    grad_inf_norm: f64,
    termination_reason: TerminationReason,
    outer_iterations: usize,
    l2_distance: f64,
    l2_distance_dual: f64,
    expected_saving: f64,
    expected_input: f64,
    mass_drift: f64,
    min_density: f64,
    negativity_reported: bool,
    hjb_unconverged_steps: usize,
    kl_exponent_clamped: bool,
    fp_substeps_total: usize,
    mc: &'r Option<McSummary>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_report_json(dir: &Path, report: &SolveReport, mc: &Option<McSummary>) -> Result<()> {
    let body = ReportJson {
        dual_value: report.dual_value,
        v_tilde: report.v_tilde,
        primal_cost: finite(report.primal_cost),
        duality_gap: finite(report.duality_gap),
        grad_inf_norm: report.grad_inf,
        termination_reason: report.termination,
        outer_iterations: report.iterations.len().saturating_sub(1),
        l2_distance: report.l2_distance,
        l2_distance_dual: report.l2_distance_dual,
        expected_saving: report.cash.expected_saving,
        expected_input: report.cash.expected_input,
        mass_drift: report.rho_trajectory.mass_drift,
        min_density: report.rho_trajectory.min_density,
        negativity_reported: report.rho_trajectory.negativity_reported,
        hjb_unconverged_steps: report.hjb_unconverged_steps,
        kl_exponent_clamped: report.kl_clamped,
        fp_substeps_total: report.rho_trajectory.total_substeps,
        mc,
    };
    let json = serde_json::to_string_pretty(&body)
        .map_err(|e| SolverError::Config(format!("report serialization: {e}")))?;
    write_file(&dir.join("report.json"), &json)
}

/// Runs the optimizer on a validated config, optionally cross-validates with
/// the path simulator, and writes the artifact set under the output directory.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let problem = config.problem()?;
    let settings = config.solve_settings();
    let report = optimize(&problem, &settings)?;

    let mc = if config.montecarlo.enabled {
        let ensemble = simulate_paths(
            &report.controls,
            config.initial.x0,
            config.montecarlo.n_paths,
            config.montecarlo.seed,
            &problem.grid,
            &problem.market,
        )?;
        Some(McSummary {
            n_paths: config.montecarlo.n_paths,
            seed: config.montecarlo.seed,
            ks_distance: ks_distance(
                &ensemble.terminal_wealth,
                report.rho_trajectory.terminal(),
                &problem.grid,
            ),
            mean_terminal_wealth: ensemble.mean_wealth(),
            mean_saving: ensemble.mean_saving(),
            saving_se: ensemble.saving_se(),
            mean_input: ensemble.mean_input(),
            clamp_fraction: ensemble.clamp_fraction,
        })
    } else {
        None
    };

    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    fs::create_dir_all(&dir)?;
    write_file(&dir.join("config_echo.toml"), &config.echo())?;
    write_terminal_densities(&dir, &report, &problem.target, &problem.grid)?;
    write_snapshots(&dir, &report, &problem.grid, config.output.snapshot_stride)?;
    write_controls(&dir, &report, &problem.grid)?;
    write_convergence(&dir, &report)?;
    write_report_json(&dir, &report, &mc)?;

    Ok(RunOutcome { report, mc, out_dir: dir })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" => Ok(SweepParam::Lambda),
            "k" => Ok(SweepParam::K),
            other => Err(SolverError::Config(format!(
                "unknown sweep parameter '{other}' (expected lambda or K)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub l2_distance: f64,
    pub dual_value: f64,
    pub expected_saving: f64,
    pub expected_input: f64,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary_path: PathBuf,
}

fn apply_sweep_value(
    config: &ExperimentConfig,
    param: SweepParam,
    value: f64,
) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    match param {
        SweepParam::Lambda => {
            c.penalty = match c.penalty {
                PenaltyConfig::SquaredL2 { .. } => PenaltyConfig::SquaredL2 { lambda: value },
                PenaltyConfig::KullbackLeibler { .. } => {
                    PenaltyConfig::KullbackLeibler { lambda: value }
                }
                PenaltyConfig::Indicator => {
                    return Err(SolverError::Config(
                        "lambda sweep needs a penalty with an intensity parameter".into(),
                    ))
                }
            };
        }
        SweepParam::K => {
            c.cost = match c.cost {
                CostConfig::CashInput { w, l, control_box, .. } => CostConfig::CashInput {
                    w,
                    l,
                    segments: vec![KSegment { t_start: 0.0, t_end: 1.0, k: value }],
                    control_box,
                },
                CostConfig::QuadraticShift { .. } => {
                    return Err(SolverError::Config(
                        "K sweep needs the cash-input cost".into(),
                    ))
                }
            };
        }
    }
    Ok(c)
}

/// One run per value; per-value failures are recorded in the summary and the
/// sweep continues. Values run in parallel (one solver instance each) with
/// per-value output directories.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepOutcome> {
    let base = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&base)?;
    let prefix = match param {
        SweepParam::Lambda => "lambda",
        SweepParam::K => "K",
    };

    // Validate applicability up front so a misdirected sweep fails fast.
    if let Some(first) = values.first() {
        apply_sweep_value(config, param, *first)?;
    }

    let rows: Vec<SweepRow> = map_indexed(values.len(), |idx| {
        let value = values[idx];
        let run = apply_sweep_value(config, param, value).and_then(|c| {
            let dir = base.join(format!("{prefix}_{value}"));
            run_experiment(&c, Some(&dir))
        });
        match run {
            Ok(outcome) => SweepRow {
                value,
                l2_distance: outcome.report.l2_distance,
                dual_value: outcome.report.dual_value,
                expected_saving: outcome.report.cash.expected_saving,
                expected_input: outcome.report.cash.expected_input,
                error: None,
            },
            Err(e) => SweepRow {
                value,
                l2_distance: f64::NAN,
                dual_value: f64::NAN,
                expected_saving: f64::NAN,
                expected_input: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    });

    let mut out = String::new();
    let _ = writeln!(out, "{CSV_SCHEMA}");
    let _ = writeln!(out, "value,l2_distance,dual_value,expected_saving,expected_input");
    for row in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt(row.value),
            fmt(row.l2_distance),
            fmt(row.dual_value),
            fmt(row.expected_saving),
            fmt(row.expected_input)
        );
    }
    let summary_path = base.join("sweep_summary.csv");
    write_file(&summary_path, &out)?;

    Ok(SweepOutcome { rows, summary_path })
}
