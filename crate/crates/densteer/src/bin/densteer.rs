//! Command-line driver: solve a config, sweep a parameter, validate a config,
//! or cross-validate a solve with the path simulator.
//!
//! Exit codes: 0 success, 2 configuration/validation failure, 3 solver
//! failure or non-convergence.

use clap::{Parser, Subcommand};
use densteer::config::ExperimentConfig;
use densteer::experiment::{run_experiment, sweep, SweepParam};
use densteer::optimizer::TerminationReason;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "densteer", version, about = "Terminal wealth distribution steering solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver on a config and write the artifact set.
    Solve {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one solve per parameter value and write sweep_summary.csv.
    Sweep {
        config: PathBuf,
        /// Parameter to vary: lambda (penalty intensity) or K (cash-input cost).
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 1,5,20,100.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Parse and validate a config, echoing it with defaults materialized.
    Validate { config: PathBuf },
    /// Solve and cross-validate with the Euler-Maruyama path simulator.
    Mc {
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn run_solve(config: &ExperimentConfig, out: Option<PathBuf>) -> ExitCode {
    match run_experiment(config, out.as_deref()) {
        Ok(outcome) => {
            let r = &outcome.report;
            println!(
                "termination: {:?}  iterations: {}  |grad|_inf: {:.3e}",
                r.termination,
                r.iterations.len().saturating_sub(1),
                r.grad_inf
            );
            println!(
                "dual value: {:.6}  primal cost: {:.6}  gap: {:.3e}",
                r.dual_value, r.primal_cost, r.duality_gap
            );
            println!(
                "L2 distance to target: {:.6}  expected saving: {:.6}  expected input: {:.6}",
                r.l2_distance, r.cash.expected_saving, r.cash.expected_input
            );
            if let Some(mc) = &outcome.mc {
                println!(
                    "MC ({} paths, seed {}): KS {:.5}  E[saving] {:.6} (se {:.2e})  E[input] {:.6}",
                    mc.n_paths, mc.seed, mc.ks_distance, mc.mean_saving, mc.saving_se, mc.mean_input
                );
            }
            println!("artifacts: {}", outcome.out_dir.display());
            if r.termination == TerminationReason::Converged {
                ExitCode::SUCCESS
            } else {
                eprintln!("solver did not converge: {:?}", r.termination);
                ExitCode::from(EXIT_SOLVER)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config, out } => {
            let config = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_solve(&config, out)
        }
        Command::Validate { config } => match load(&config) {
            Ok(c) => {
                print!("{}", c.echo());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Mc { config, paths, seed, out } => {
            let mut config = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            config.montecarlo.enabled = true;
            config.montecarlo.n_paths = paths;
            config.montecarlo.seed = seed;
            run_solve(&config, out)
        }
        Command::Sweep { config, param, values } => {
            let config = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let param: SweepParam = match param.parse() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            match sweep(&config, param, &values) {
                Ok(outcome) => {
                    let mut failed = false;
                    for row in &outcome.rows {
                        match &row.error {
                            None => println!(
                                "value {}: L2 {:.6}  dual {:.6}  saving {:.6}  input {:.6}",
                                row.value,
                                row.l2_distance,
                                row.dual_value,
                                row.expected_saving,
                                row.expected_input
                            ),
                            Some(e) => {
                                failed = true;
                                eprintln!("value {} failed: {e}", row.value);
                            }
                        }
                    }
                    println!("summary: {}", outcome.summary_path.display());
                    if failed {
                        ExitCode::from(EXIT_SOLVER)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_VALIDATION)
                }
            }
        }
    }
}
