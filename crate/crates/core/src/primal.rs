//! Primal recovery from the dual triple: control extraction, state solve,
//! regularized objective with the L1 term, and the duality gap.

use crate::prox::project_box;
use crate::solver::{DualIterate, ProblemSpec, SolveCounters, SolverError};
use crate::sparse::{cg_solve, dot};

/// Relative tolerance of the Jacobi-preconditioned state solve.
pub const STATE_TOL: f64 = 1e-11;

/// Box violations beyond this make the objective infinite.
const BOX_SENTINEL_TOL: f64 = 1e-12;

/// The raw control u = (p - lambda - mu)/alpha, its box projection, and the
/// state driven by u.
#[derive(Debug, Clone)]
pub struct PrimalPair {
    pub u: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn recover_control(spec: &ProblemSpec, z: &DualIterate) -> Result<PrimalPair, SolverError> {
    let (u, u_hat) = recover_control_triple(spec, &z.lambda, &z.p, &z.mu);
    let y = solve_state(spec, &u)?;
    Ok(PrimalPair { u, u_hat, y })
}

pub(crate) fn recover_control_triple(
    spec: &ProblemSpec,
    lambda: &[f64],
    p: &[f64],
    mu: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = spec.n_dof();
    let u: Vec<f64> = (0..n)
        .map(|i| (p[i] - lambda[i] - mu[i]) / spec.alpha)
        .collect();
    let u_hat = project_box(&u, spec.bounds);
    (u, u_hat)
}

/// Solves the state equation K y = M (u + yr).
pub fn solve_state(spec: &ProblemSpec, u: &[f64]) -> Result<Vec<f64>, SolverError> {
    let mut counters = SolveCounters::default();
    solve_state_counted(spec, u, &mut counters)
}

pub(crate) fn solve_state_counted(
    spec: &ProblemSpec,
    u: &[f64],
    counters: &mut SolveCounters,
) -> Result<Vec<f64>, SolverError> {
    let n = spec.n_dof();
    if u.len() != n {
        return Err(SolverError::InvalidParameter(format!(
            "control has length {}, expected {n}",
            u.len()
        )));
    }
    let sum: Vec<f64> = (0..n).map(|i| u[i] + spec.yr[i]).collect();
    let rhs = spec.ops.mass.matvec(&sum);
    let diag = spec.ops.stiffness.diagonal();
    let k = &spec.ops.stiffness;
    let (y, stats) = cg_solve(
        |x: &[f64], out: &mut [f64]| k.matvec_into(x, out),
        &rhs,
        STATE_TOL,
        (10 * n).max(200),
        Some(&diag),
        None,
    );
    counters.state_solves += 1;
    counters.state_iterations += stats.iterations as u64;
    if !stats.relative_residual.is_finite() {
        return Err(SolverError::NumericalBreakdown {
            context: "state solve",
        });
    }
    if !stats.converged {
        counters.unconverged_solves += 1;
    }
    Ok(y)
}

/// Regularized tracking objective
///   J(u) = 1/2 |y(u) - yd|_M^2 + alpha/2 |u|_M^2 + beta |M u|_1
/// with an infinite sentinel when u leaves the control box.
pub fn primal_objective(spec: &ProblemSpec, u: &[f64]) -> Result<f64, SolverError> {
    let mut counters = SolveCounters::default();
    primal_objective_counted(spec, u, &mut counters)
}

pub(crate) fn primal_objective_counted(
    spec: &ProblemSpec,
    u: &[f64],
    counters: &mut SolveCounters,
) -> Result<f64, SolverError> {
    let n = spec.n_dof();
    if u.len() != n {
        return Err(SolverError::InvalidParameter(format!(
            "control has length {}, expected {n}",
            u.len()
        )));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::InvalidParameter(
            "control contains a non-finite entry".to_string(),
        ));
    }
    if u.iter().any(|&x| spec.bounds.violation(x) > BOX_SENTINEL_TOL) {
        return Ok(f64::INFINITY);
    }
    let y = solve_state_counted(spec, u, counters)?;
    let d: Vec<f64> = (0..n).map(|i| y[i] - spec.yd[i]).collect();
    let md = spec.ops.mass.matvec(&d);
    let tracking = 0.5 * dot(&d, &md);
    let mu_vec = spec.ops.mass.matvec(u);
    let tikhonov = 0.5 * spec.alpha * dot(u, &mu_vec);
    let l1: f64 = spec.beta * mu_vec.iter().map(|v| v.abs()).sum::<f64>();
    Ok(tracking + tikhonov + l1)
}

/// J(u_hat) + Phi(z): nonnegative at a saddle point, and a certificate of
/// (near-)optimality when small.
pub fn duality_gap(spec: &ProblemSpec, z: &DualIterate) -> Result<f64, SolverError> {
    let phi = crate::solver::dual_objective(spec, z);
    let mut counters = SolveCounters::default();
    duality_gap_triple(spec, &z.lambda, &z.p, &z.mu, phi, &mut counters)
}

pub(crate) fn duality_gap_triple(
    spec: &ProblemSpec,
    lambda: &[f64],
    p: &[f64],
    mu: &[f64],
    phi: f64,
    counters: &mut SolveCounters,
) -> Result<f64, SolverError> {
    if phi.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let (_, u_hat) = recover_control_triple(spec, lambda, p, mu);
    let j = primal_objective_counted(spec, &u_hat, counters)?;
    Ok(j + phi)
}
