//! octrl: solve and study driver for the sparse elliptic control solver.

use clap::{Args, Parser, Subcommand};
use octrl_harness::config::Config;
use octrl_harness::error::HarnessError;
use octrl_harness::report::write_text;
use octrl_harness::studies;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "octrl",
    about = "Sparse-control elliptic solver: single solves and convergence studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solve and write solve.json.
    Solve(Common),
    /// Per-iteration convergence rates against a high-accuracy reference; writes rate_study.csv.
    RateStudy(Common),
    /// Iteration counts across meshes; writes mesh_study.csv.
    MeshStudy(Common),
    /// Initial-distance constant tau_h under mesh refinement; writes tau_study.csv.
    TauStudy(Common),
    /// Discretization error of the optimal control; writes error_study.csv.
    ErrorStudy(Common),
    /// Cross-check the solver against the reference oracles; writes oracle_check.json.
    OracleCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration with [problem], [solver], [study] sections.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override solver.kkt_tol.
    #[arg(long)]
    tol: Option<f64>,
    /// Override solver.max_iter.
    #[arg(long)]
    max_iter: Option<usize>,
}

fn load_config(common: &Common) -> Result<Config, HarnessError> {
    let mut cfg = Config::from_path(&common.config)?;
    if let Some(tol) = common.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(HarnessError::Validation(format!(
                "--tol must be positive, got {tol}"
            )));
        }
        cfg.kkt_tol = tol;
    }
    if let Some(max_iter) = common.max_iter {
        if max_iter == 0 {
            return Err(HarnessError::Validation(
                "--max-iter must be at least 1".into(),
            ));
        }
        cfg.max_iter = max_iter;
    }
    Ok(cfg)
}

fn dispatch(command: &Command) -> Result<(), HarnessError> {
    match command {
        Command::Solve(c) => {
            let cfg = load_config(c)?;
            let outcome = studies::run_solve(&cfg)?;
            let path = c.out.join("solve.json");
            write_text(&path, &studies::solve_json(&outcome))?;
            println!(
                "solve: n_side = {}, iterations = {}, converged = {}, objective = {:.12e}, gap = {:.3e}",
                outcome.n_side,
                outcome.report.iterations,
                outcome.report.converged,
                outcome.objective,
                outcome.gap
            );
            println!("wrote {}", path.display());
            if !outcome.report.converged {
                let eta = outcome.report.final_eta;
                return Err(HarnessError::NonConvergence {
                    context: "solve".into(),
                    iterations: outcome.report.iterations,
                    residual: eta[0].max(eta[1]).max(eta[2]),
                });
            }
            Ok(())
        }
        Command::RateStudy(c) => {
            let cfg = load_config(c)?;
            let study = studies::rate_study(&cfg)?;
            let path = c.out.join("rate_study.csv");
            write_text(&path, &studies::rate_csv(&study))?;
            match study.slope {
                Some(s) => println!(
                    "rate study: n_side = {}, k_final = {}, tau = {:.6e}, slope = {:.3} over {} fit rows",
                    study.n_side, study.k_final, study.tau, s, study.fit_rows
                ),
                None => println!(
                    "rate study: n_side = {}, k_final = {}, tau = {:.6e}, slope fit window empty",
                    study.n_side, study.k_final, study.tau
                ),
            }
            println!(
                "  sup k*z_dist = {:.6e} at k = {}, sup sqrt(k)*u_gap = {:.6e} at k = {}",
                study.sup_k_z_dist,
                study.argmax_k_z_dist,
                study.sup_sqrt_k_u_gap,
                study.argmax_sqrt_k_u_gap
            );
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::MeshStudy(c) => {
            let cfg = load_config(c)?;
            let study = studies::mesh_study(&cfg)?;
            let path = c.out.join("mesh_study.csv");
            write_text(&path, &studies::mesh_csv(&study))?;
            println!(
                "mesh study: kkt_tol = {:.3e}, epsilon = {:.3e}",
                study.kkt_tol, study.epsilon
            );
            for row in &study.rows {
                println!(
                    "  n_side = {:>3}: iterations = {}, k_eps = {}, wall = {:.3}s",
                    row.n_side, row.iterations, row.k_eps, row.wall_time_s
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::TauStudy(c) => {
            let cfg = load_config(c)?;
            let rows = studies::tau_study(&cfg)?;
            let path = c.out.join("tau_study.csv");
            write_text(&path, &studies::tau_csv(&rows))?;
            for row in &rows {
                match row.diff {
                    Some(d) => println!(
                        "  h = 1/{}: tau = {:.9e}, diff vs coarser = {:+.3e}",
                        row.n_side, row.tau, d
                    ),
                    None => println!("  h = 1/{}: tau = {:.9e}", row.n_side, row.tau),
                }
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ErrorStudy(c) => {
            let cfg = load_config(c)?;
            let study = studies::error_study(&cfg)?;
            let path = c.out.join("error_study.csv");
            write_text(&path, &studies::error_csv(&study))?;
            println!("error study: reference n_side = {}", study.ref_n_side);
            for row in &study.rows {
                match row.order {
                    Some(o) => println!(
                        "  h = 1/{}: l2 error = {:.6e}, order = {:.3}",
                        row.n_side, row.l2_error, o
                    ),
                    None => println!("  h = 1/{}: l2 error = {:.6e}", row.n_side, row.l2_error),
                }
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::OracleCheck(c) => {
            let cfg = load_config(c)?;
            let check = studies::oracle_check(&cfg)?;
            let path = c.out.join("oracle_check.json");
            write_text(&path, &studies::oracle_json(&check))?;
            println!(
                "oracle check: n_side = {}, method = {:?}, certificate = {:.3e}",
                check.n_side, check.method, check.certificate
            );
            println!(
                "  |delta u| = {:.6e}, |delta objective| = {:.6e}",
                check.delta_u, check.delta_objective
            );
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
