//! The five harness commands: single solve, rate study, mesh-independence
//! study, tau refinement study, and discretization-error study.

use crate::config::Config;
use crate::error::HarnessError;
use crate::report::{csv_document, Cell, JsonObject};
use octrl_core::fem::nodal_sample;
use octrl_core::oracle::{enumerate_solve, subgradient_solve, OracleMethod, ENUMERATE_MAX_DOF};
use octrl_core::primal::{duality_gap, primal_objective, recover_control, PrimalPair};
use octrl_core::solver::{
    compute_tau_h, dual_objective, run, ProblemSpec, SolveReport, SolverConfig,
};
use octrl_core::sparse::{dot, norm2};

/// Tolerance of the high-accuracy reference runs the studies lean on.
pub const REF_KKT_TOL: f64 = 1e-12;

/// Floor under which a dual-objective gap carries no slope information
/// (relative to the reference objective scale).
fn phi_noise_floor(phi_star: f64) -> f64 {
    10.0 * f64::EPSILON * (1.0 + phi_star.abs())
}

/// A reference solve: converged, or stalled at the double-precision floor of
/// the residual measurement (which still pins the iterate to ~1e-11).
fn reference_run(
    spec: &ProblemSpec,
    max_iter: usize,
    context: &str,
) -> Result<SolveReport, HarnessError> {
    let report = run(
        spec,
        &SolverConfig {
            kkt_tol: REF_KKT_TOL,
            max_iter,
            ..Default::default()
        },
    )?;
    if !(report.converged || report.stalled) {
        let eta = report.final_eta;
        return Err(HarnessError::NonConvergence {
            context: context.to_string(),
            iterations: report.iterations,
            residual: eta[0].max(eta[1]).max(eta[2]),
        });
    }
    Ok(report)
}

fn reference_triple(report: &SolveReport) -> [Vec<f64>; 3] {
    [
        report.final_z.lambda.clone(),
        report.final_z.p.clone(),
        report.final_z.mu.clone(),
    ]
}

// ---------------------------------------------------------------- solve ----

pub struct SolveOutcome {
    pub n_side: usize,
    pub report: SolveReport,
    pub primal: PrimalPair,
    pub objective: f64,
    pub gap: f64,
}

pub fn run_solve(cfg: &Config) -> Result<SolveOutcome, HarnessError> {
    let n_side = cfg.single_mesh()?;
    let spec = cfg.build_spec(n_side)?;
    let report = run(
        &spec,
        &SolverConfig {
            kkt_tol: cfg.kkt_tol,
            max_iter: cfg.max_iter,
            record_history: true,
            ..Default::default()
        },
    )?;
    let primal = recover_control(&spec, &report.final_z)?;
    let objective = primal_objective(&spec, &primal.u_hat)?;
    let gap = duality_gap(&spec, &report.final_z)?;
    Ok(SolveOutcome {
        n_side,
        report,
        primal,
        objective,
        gap,
    })
}

/// The solve report document. Field names are part of the output contract:
/// iterations, converged, kkt_tol, history.{phi, eta1, eta2, eta3, gap},
/// final.{lambda, p, mu}; primal values ride along for convenience.
pub fn solve_json(out: &SolveOutcome) -> String {
    let r = &out.report;
    let mut doc = JsonObject::root();
    doc.int("iterations", r.iterations as u64)
        .bool("converged", r.converged)
        .bool("stalled", r.stalled)
        .float("kkt_tol", r.kkt_tol)
        .int("n_side", out.n_side as u64);
    let pick = |f: fn(&octrl_core::solver::HistoryRow) -> f64| -> Vec<f64> {
        r.history.iter().map(f).collect()
    };
    let phi = pick(|h| h.phi.unwrap_or(f64::NAN));
    let eta1 = pick(|h| h.eta1);
    let eta2 = pick(|h| h.eta2);
    let eta3 = pick(|h| h.eta3);
    let gap = pick(|h| h.gap.unwrap_or(f64::NAN));
    doc.object("history", |h| {
        h.float_array("phi", &phi)
            .float_array("eta1", &eta1)
            .float_array("eta2", &eta2)
            .float_array("eta3", &eta3)
            .float_array("gap", &gap);
    });
    doc.object("final", |f| {
        f.float_array("lambda", &r.final_z.lambda)
            .float_array("p", &r.final_z.p)
            .float_array("mu", &r.final_z.mu);
    });
    doc.object("primal", |p| {
        p.float_array("u", &out.primal.u)
            .float_array("u_hat", &out.primal.u_hat)
            .float_array("y", &out.primal.y)
            .float("objective", out.objective)
            .float("duality_gap", out.gap);
    });
    doc.object("counters", |c| {
        c.int("schur_solves", r.counters.schur_solves)
            .int("schur_iterations", r.counters.schur_iterations)
            .int("mass_solves", r.counters.mass_solves)
            .int("mass_iterations", r.counters.mass_iterations)
            .int("state_solves", r.counters.state_solves)
            .int("state_iterations", r.counters.state_iterations)
            .int("unconverged_solves", r.counters.unconverged_solves);
    });
    doc.finish()
}

// ----------------------------------------------------------- rate study ----

pub struct RateRow {
    pub k: usize,
    pub phi_gap: f64,
    pub bound: f64,
    pub z_dist: f64,
    pub k_z_dist: f64,
    pub u_gap: f64,
    pub sqrt_k_u_gap: f64,
    pub duality_gap: f64,
    pub k_duality_gap: f64,
}

pub struct RateStudy {
    pub n_side: usize,
    pub tau: f64,
    pub phi_star: f64,
    pub objective_star: f64,
    pub k_final: usize,
    pub rows: Vec<RateRow>,
    /// Least-squares log-log slope of phi_gap over k in [10, k_final/2],
    /// rows below the noise floor excluded. None when the window is empty.
    pub slope: Option<f64>,
    pub fit_rows: usize,
    pub sup_k_z_dist: f64,
    pub argmax_k_z_dist: usize,
    pub sup_sqrt_k_u_gap: f64,
    pub argmax_sqrt_k_u_gap: usize,
    pub ref_converged: bool,
    pub ref_stalled: bool,
}

pub fn rate_study(cfg: &Config) -> Result<RateStudy, HarnessError> {
    let n_side = cfg.single_mesh()?;
    let spec = cfg.build_spec(n_side)?;
    let reference = reference_run(&spec, cfg.max_iter, "rate study reference")?;
    let phi_star = dual_objective(&spec, &reference.final_z);
    let pair = recover_control(&spec, &reference.final_z)?;
    let objective_star = primal_objective(&spec, &pair.u_hat)?;
    let n = spec.n_dof();
    let zeros = vec![0.0; n];
    let zstar = reference_triple(&reference);
    let tau = compute_tau_h(
        &spec,
        (&zeros, &zeros, &zeros),
        (&zstar[0], &zstar[1], &zstar[2]),
    )?;

    // Deterministic replay of the reference run, now instrumented.
    let traced = run(
        &spec,
        &SolverConfig {
            kkt_tol: REF_KKT_TOL,
            max_iter: cfg.max_iter,
            record_history: true,
            reference_z: Some(zstar),
            ..Default::default()
        },
    )?;
    let k_final = traced.iterations;

    let mut rows = Vec::with_capacity(traced.history.len());
    for h in &traced.history {
        let k = h.k;
        let phi_gap = h.phi.unwrap_or(f64::NAN) - phi_star;
        let bound = 4.0 * tau / ((k + 1) * (k + 1)) as f64;
        let z_dist = h.z_dist.unwrap_or(f64::NAN);
        let u_gap = h.u_err.unwrap_or(f64::NAN);
        let duality_gap = h.gap.unwrap_or(f64::NAN);
        rows.push(RateRow {
            k,
            phi_gap,
            bound,
            z_dist,
            k_z_dist: k as f64 * z_dist,
            u_gap,
            sqrt_k_u_gap: (k as f64).sqrt() * u_gap,
            duality_gap,
            k_duality_gap: k as f64 * duality_gap,
        });
    }

    let floor = phi_noise_floor(phi_star);
    let fit: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.k >= 10 && r.k <= k_final / 2 && r.phi_gap > floor)
        .map(|r| ((r.k as f64).ln(), r.phi_gap.ln()))
        .collect();
    let slope = fit_slope(&fit);

    let (mut sup_kz, mut arg_kz) = (f64::NEG_INFINITY, 0);
    let (mut sup_su, mut arg_su) = (f64::NEG_INFINITY, 0);
    for r in &rows {
        if r.k_z_dist > sup_kz {
            sup_kz = r.k_z_dist;
            arg_kz = r.k;
        }
        if r.sqrt_k_u_gap > sup_su {
            sup_su = r.sqrt_k_u_gap;
            arg_su = r.k;
        }
    }

    Ok(RateStudy {
        n_side,
        tau,
        phi_star,
        objective_star,
        k_final,
        rows,
        slope,
        fit_rows: fit.len(),
        sup_k_z_dist: sup_kz,
        argmax_k_z_dist: arg_kz,
        sup_sqrt_k_u_gap: sup_su,
        argmax_sqrt_k_u_gap: arg_su,
        ref_converged: reference.converged,
        ref_stalled: reference.stalled,
    })
}

fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

pub fn rate_csv(study: &RateStudy) -> String {
    let header = [
        "k",
        "phi_gap",
        "bound",
        "z_dist",
        "k_z_dist",
        "u_gap",
        "sqrt_k_u_gap",
        "duality_gap",
        "k_duality_gap",
    ];
    let rows: Vec<Vec<Cell>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Int(r.k as u64),
                Cell::Float(r.phi_gap),
                Cell::Float(r.bound),
                Cell::Float(r.z_dist),
                Cell::Float(r.k_z_dist),
                Cell::Float(r.u_gap),
                Cell::Float(r.sqrt_k_u_gap),
                Cell::Float(r.duality_gap),
                Cell::Float(r.k_duality_gap),
            ]
        })
        .collect();
    csv_document(&header, &rows)
}

// ----------------------------------------------------------- mesh study ----

pub struct MeshRow {
    pub n_side: usize,
    pub h: f64,
    pub k_eps: usize,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub counters: octrl_core::solver::SolveCounters,
}

pub struct MeshStudy {
    pub epsilon: f64,
    pub kkt_tol: f64,
    pub rows: Vec<MeshRow>,
}

pub fn mesh_study(cfg: &Config) -> Result<MeshStudy, HarnessError> {
    let meshes = cfg.study_meshes(3)?;
    let mut rows = Vec::with_capacity(meshes.len());
    for &n_side in meshes {
        let spec = cfg.build_spec(n_side)?;
        let reference = reference_run(
            &spec,
            cfg.max_iter,
            &format!("mesh study reference at n_side = {n_side}"),
        )?;
        let report = run(
            &spec,
            &SolverConfig {
                kkt_tol: cfg.kkt_tol,
                max_iter: cfg.max_iter,
                record_history: true,
                reference_z: Some(reference_triple(&reference)),
                ..Default::default()
            },
        )?;
        if !report.converged {
            let eta = report.final_eta;
            return Err(HarnessError::NonConvergence {
                context: format!("mesh study solve at n_side = {n_side}"),
                iterations: report.iterations,
                residual: eta[0].max(eta[1]).max(eta[2]),
            });
        }
        let k_eps = report
            .history
            .iter()
            .find(|h| h.u_err.is_some_and(|e| e < cfg.epsilon))
            .map(|h| h.k)
            .ok_or_else(|| HarnessError::NonConvergence {
                context: format!(
                    "mesh study at n_side = {n_side}: control never within epsilon = {:.3e}",
                    cfg.epsilon
                ),
                iterations: report.iterations,
                residual: report
                    .history
                    .last()
                    .and_then(|h| h.u_err)
                    .unwrap_or(f64::NAN),
            })?;
        rows.push(MeshRow {
            n_side,
            h: 1.0 / n_side as f64,
            k_eps,
            iterations: report.iterations,
            wall_time_s: report.wall_time_s,
            counters: report.counters,
        });
    }
    Ok(MeshStudy {
        epsilon: cfg.epsilon,
        kkt_tol: cfg.kkt_tol,
        rows,
    })
}

pub fn mesh_csv(study: &MeshStudy) -> String {
    let header = [
        "n_side",
        "h",
        "k_eps",
        "iterations",
        "wall_time_s",
        "schur_solves",
        "schur_iterations",
        "mass_solves",
        "mass_iterations",
        "state_solves",
        "state_iterations",
        "unconverged_solves",
    ];
    let rows: Vec<Vec<Cell>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Int(r.n_side as u64),
                Cell::Float(r.h),
                Cell::Int(r.k_eps as u64),
                Cell::Int(r.iterations as u64),
                Cell::Float(r.wall_time_s),
                Cell::Int(r.counters.schur_solves),
                Cell::Int(r.counters.schur_iterations),
                Cell::Int(r.counters.mass_solves),
                Cell::Int(r.counters.mass_iterations),
                Cell::Int(r.counters.state_solves),
                Cell::Int(r.counters.state_iterations),
                Cell::Int(r.counters.unconverged_solves),
            ]
        })
        .collect();
    csv_document(&header, &rows)
}

// ------------------------------------------------------------ tau study ----

pub struct TauRow {
    pub n_side: usize,
    pub h: f64,
    pub tau: f64,
    /// tau_h - tau_{2h}; None on the coarsest mesh.
    pub diff: Option<f64>,
}

pub fn tau_study(cfg: &Config) -> Result<Vec<TauRow>, HarnessError> {
    let meshes = cfg.study_meshes(2)?;
    if meshes.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(HarnessError::Validation(
            "tau study meshes must double (each entry twice the previous)".into(),
        ));
    }
    let mut rows: Vec<TauRow> = Vec::with_capacity(meshes.len());
    for &n_side in meshes {
        let spec = cfg.build_spec(n_side)?;
        let sample = |e: &crate::expr::Expr, field: &str| -> Result<Vec<f64>, HarnessError> {
            nodal_sample(&spec.mesh, |x, y| e.eval(x, y)).map_err(|err| {
                HarnessError::Validation(format!(
                    "sampling {field} at n_side = {n_side}: {err}"
                ))
            })
        };
        let z0_lambda = sample(&cfg.z0_lambda, "study.z0_lambda")?;
        let z0_p = sample(&cfg.z0_p, "study.z0_p")?;
        let z0_mu = sample(&cfg.z0_mu, "study.z0_mu")?;
        let reference = reference_run(
            &spec,
            cfg.max_iter,
            &format!("tau study reference at n_side = {n_side}"),
        )?;
        let zstar = reference_triple(&reference);
        let tau = compute_tau_h(
            &spec,
            (&z0_lambda, &z0_p, &z0_mu),
            (&zstar[0], &zstar[1], &zstar[2]),
        )?;
        let diff = rows.last().map(|prev| tau - prev.tau);
        rows.push(TauRow {
            n_side,
            h: 1.0 / n_side as f64,
            tau,
            diff,
        });
    }
    Ok(rows)
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let header = ["h", "tau", "tau_diff_vs_coarser"];
    let body: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                Cell::Float(r.h),
                Cell::Float(r.tau),
                r.diff.map_or(Cell::Empty, Cell::Float),
            ]
        })
        .collect();
    csv_document(&header, &body)
}

// ---------------------------------------------------------- error study ----

pub struct ErrorRow {
    pub n_side: usize,
    pub h: f64,
    pub l2_error: f64,
    /// Observed order vs the previous (coarser) row; None on the first.
    pub order: Option<f64>,
}

pub struct ErrorStudy {
    pub ref_n_side: usize,
    pub rows: Vec<ErrorRow>,
}

pub fn error_study(cfg: &Config) -> Result<ErrorStudy, HarnessError> {
    let meshes = cfg.study_meshes(3)?;
    let ref_n_side = 2 * meshes[meshes.len() - 1];

    let solve_u_hat = |n_side: usize| -> Result<(ProblemSpec, Vec<f64>), HarnessError> {
        let spec = cfg.build_spec(n_side)?;
        let report = run(
            &spec,
            &SolverConfig {
                kkt_tol: cfg.kkt_tol,
                max_iter: cfg.max_iter,
                ..Default::default()
            },
        )?;
        if !(report.converged || report.stalled) {
            let eta = report.final_eta;
            return Err(HarnessError::NonConvergence {
                context: format!("error study solve at n_side = {n_side}"),
                iterations: report.iterations,
                residual: eta[0].max(eta[1]).max(eta[2]),
            });
        }
        let pair = recover_control(&spec, &report.final_z)?;
        Ok((spec, pair.u_hat))
    };

    let (ref_spec, ref_u) = solve_u_hat(ref_n_side)?;
    let mut rows: Vec<ErrorRow> = Vec::with_capacity(meshes.len());
    for &n_side in meshes {
        let (spec, u_hat) = solve_u_hat(n_side)?;
        // Nodal interpolation of the coarse control onto the fine mesh, then
        // the L2 (mass) norm of the difference there.
        let n_ref = ref_spec.n_dof();
        let mut diff = vec![0.0; n_ref];
        for d in 0..n_ref {
            let [x, y] = ref_spec.mesh.dof_xy(d);
            diff[d] = spec.mesh.eval_p1(&u_hat, x, y) - ref_u[d];
        }
        let m_diff = ref_spec.ops.mass.matvec(&diff);
        let l2_error = dot(&diff, &m_diff).max(0.0).sqrt();
        let h = 1.0 / n_side as f64;
        let order = rows.last().map(|prev| {
            (prev.l2_error / l2_error).ln() / (prev.h / h).ln()
        });
        rows.push(ErrorRow {
            n_side,
            h,
            l2_error,
            order,
        });
    }
    Ok(ErrorStudy { ref_n_side, rows })
}

pub fn error_csv(study: &ErrorStudy) -> String {
    let header = ["h", "l2_error", "order"];
    let body: Vec<Vec<Cell>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Float(r.h),
                Cell::Float(r.l2_error),
                r.order.map_or(Cell::Empty, Cell::Float),
            ]
        })
        .collect();
    csv_document(&header, &body)
}

// ---------------------------------------------------------- oracle check ----

pub struct OracleCheck {
    pub n_side: usize,
    pub method: OracleMethod,
    pub certificate: f64,
    pub objective_oracle: f64,
    pub objective_solver: f64,
    pub delta_u: f64,
    pub delta_objective: f64,
}

pub fn oracle_check(cfg: &Config) -> Result<OracleCheck, HarnessError> {
    let n_side = cfg.single_mesh()?;
    let spec = cfg.build_spec(n_side)?;
    let report = run(
        &spec,
        &SolverConfig {
            kkt_tol: cfg.kkt_tol,
            max_iter: cfg.max_iter,
            ..Default::default()
        },
    )?;
    if !(report.converged || report.stalled) {
        let eta = report.final_eta;
        return Err(HarnessError::NonConvergence {
            context: format!("oracle check solve at n_side = {n_side}"),
            iterations: report.iterations,
            residual: eta[0].max(eta[1]).max(eta[2]),
        });
    }
    let pair = recover_control(&spec, &report.final_z)?;
    let objective_solver = primal_objective(&spec, &pair.u_hat)?;

    let oracle = if spec.n_dof() <= ENUMERATE_MAX_DOF {
        enumerate_solve(&spec)
    } else {
        subgradient_solve(&spec, 1_000_000, Some(&pair.u_hat))
    }
    .map_err(|e| HarnessError::Validation(format!("oracle: {e}")))?;

    let du: Vec<f64> = pair
        .u_hat
        .iter()
        .zip(&oracle.u_star)
        .map(|(a, b)| a - b)
        .collect();
    Ok(OracleCheck {
        n_side,
        method: oracle.method,
        certificate: oracle.certificate,
        objective_oracle: oracle.objective,
        objective_solver,
        delta_u: norm2(&du),
        delta_objective: (objective_solver - oracle.objective).abs(),
    })
}

pub fn oracle_json(check: &OracleCheck) -> String {
    let mut doc = JsonObject::root();
    doc.int("n_side", check.n_side as u64);
    let method = match check.method {
        OracleMethod::Enumeration => "enumeration",
        OracleMethod::Subgradient => "subgradient",
    };
    doc.object("oracle", |o| {
        o.string("method", method)
            .float("certificate", check.certificate)
            .float("objective", check.objective_oracle);
    });
    doc.object("solver", |s| {
        s.float("objective", check.objective_solver);
    });
    doc.float("delta_u", check.delta_u)
        .float("delta_objective", check.delta_objective);
    doc.finish()
}
