//! Desk-scale reference solvers that share no code with the production path:
//! exact KKT pattern enumeration and a slow projected subgradient method, both
//! working on the dense reduced objective in the control variable alone.

use crate::solver::ProblemSpec;
use crate::sparse::{cg_solve, dot, extreme_eigenvalue, EigSide};
use std::fmt;

pub const ENUMERATE_MAX_DOF: usize = 6;
pub const SUBGRADIENT_MAX_DOF: usize = 200;
pub const SUBGRADIENT_MIN_ITERS: usize = 100_000;

/// Pattern acceptance threshold: every KKT branch condition must hold with
/// violation at most this.
const KKT_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    TooLarge { n_dof: usize, limit: usize },
    TooFewIterations { iters: usize, minimum: usize },
    SingularOperator,
    /// No sign/activity pattern verified; indicates a programming error, not
    /// a property of the problem (some pattern always certifies the minimizer).
    NoVerifiedPattern,
    LengthMismatch { got: usize, expected: usize },
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge { n_dof, limit } => {
                write!(f, "problem has {n_dof} DOFs, oracle limit is {limit}")
            }
            OracleError::TooFewIterations { iters, minimum } => {
                write!(f, "subgradient oracle needs >= {minimum} iterations, got {iters}")
            }
            OracleError::SingularOperator => write!(f, "dense factorization met a zero pivot"),
            OracleError::NoVerifiedPattern => {
                write!(f, "no KKT pattern verified; enumeration oracle is broken")
            }
            OracleError::LengthMismatch { got, expected } => {
                write!(f, "comparison control has length {got}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for OracleError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    Enumeration,
    Subgradient,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub u_star: Vec<f64>,
    pub objective: f64,
    pub method: OracleMethod,
    /// Enumeration: the largest KKT branch violation of the returned pattern
    /// (<= 1e-10 by construction). Subgradient: objective excess over a
    /// supplied comparison control, else the diminishing-step suboptimality
    /// bound.
    pub certificate: f64,
}

// Row-major dense LU with partial pivoting. Pivots below 1e-14 of the matrix
// scale count as singular.
fn lu_factor(a: &mut [f64], n: usize) -> Option<Vec<usize>> {
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let floor = 1e-14 * scale;
    let mut piv = vec![0usize; n];
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for r in (k + 1)..n {
            let v = a[r * n + k].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if !(best > floor) {
            return None;
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        let pivot = a[k * n + k];
        for r in (k + 1)..n {
            let f = a[r * n + k] / pivot;
            a[r * n + k] = f;
            for j in (k + 1)..n {
                a[r * n + j] -= f * a[k * n + j];
            }
        }
    }
    Some(piv)
}

fn lu_solve(a: &[f64], n: usize, piv: &[usize], b: &mut [f64]) {
    for k in 0..n {
        b.swap(k, piv[k]);
    }
    for i in 1..n {
        let mut s = b[i];
        for j in 0..i {
            s -= a[i * n + j] * b[j];
        }
        b[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in (i + 1)..n {
            s -= a[i * n + j] * b[j];
        }
        b[i] = s / a[i * n + i];
    }
}

fn dense_matvec(a: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] = dot(row, x);
    }
}

/// The control problem reduced to u alone:
///   J(u) = 1/2 u' H u + c' u + j0 + beta |M u|_1 + box indicator,
/// H = S' M S + alpha M with S = K^{-1} M, c = S' M (S yr - yd).
struct ReducedModel {
    n: usize,
    h: Vec<f64>,
    c: Vec<f64>,
    j0: f64,
    m: Vec<f64>,
}

fn reduced_model(spec: &ProblemSpec) -> Result<ReducedModel, OracleError> {
    let n = spec.n_dof();
    let flatten = |rows: Vec<Vec<f64>>| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * n);
        for r in rows {
            out.extend_from_slice(&r);
        }
        out
    };
    let kd = flatten(spec.ops.stiffness.to_dense());
    let md = flatten(spec.ops.mass.to_dense());
    let mut klu = kd;
    let piv = lu_factor(&mut klu, n).ok_or(OracleError::SingularOperator)?;

    // S = K^{-1} M, one solve per column.
    let mut s = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = md[i * n + j];
        }
        lu_solve(&klu, n, &piv, &mut col);
        for i in 0..n {
            s[i * n + j] = col[i];
        }
    }
    // A = M S, H = S' A + alpha M.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += md[i * n + k] * s[k * n + j];
            }
            a[i * n + j] = acc;
        }
    }
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += s[k * n + i] * a[k * n + j];
            }
            h[i * n + j] = acc + spec.alpha * md[i * n + j];
        }
    }
    // e = S yr - yd, c = S' M e, j0 = 1/2 e' M e.
    let mut e = vec![0.0; n];
    dense_matvec(&s, n, &spec.yr, &mut e);
    for i in 0..n {
        e[i] -= spec.yd[i];
    }
    let mut me = vec![0.0; n];
    dense_matvec(&md, n, &e, &mut me);
    let mut c = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += s[k * n + i] * me[k];
        }
        c[i] = acc;
    }
    let j0 = 0.5 * dot(&e, &me);
    Ok(ReducedModel { n, h, c, j0, m: md })
}

impl ReducedModel {
    /// Objective value together with H u and M u (reused by callers).
    fn eval(&self, beta: f64, u: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut hu = vec![0.0; n];
        dense_matvec(&self.h, n, u, &mut hu);
        let mut mu = vec![0.0; n];
        dense_matvec(&self.m, n, u, &mut mu);
        let l1: f64 = mu.iter().map(|v| v.abs()).sum();
        let j = 0.5 * dot(u, &hu) + dot(&self.c, u) + self.j0 + beta * l1;
        (j, hu, mu)
    }
}

fn bound_of(code: u8, lo: f64, hi: f64) -> f64 {
    if code == 0 {
        lo
    } else {
        hi
    }
}

// Assembles and solves the square linear system of one (sigma, pi) pattern,
// then checks every KKT branch condition. Returns the control and its largest
// violation when the pattern verifies.
fn try_pattern(
    model: &ReducedModel,
    beta: f64,
    lo: f64,
    hi: f64,
    sigma: &[i8],
    pi: &[u8],
) -> Option<(Vec<f64>, f64)> {
    let n = model.n;
    let mut ucol = vec![usize::MAX; n];
    let mut scol = vec![usize::MAX; n];
    let mut vcol = vec![usize::MAX; n];
    let mut dim = 0usize;
    for i in 0..n {
        if pi[i] == 1 {
            ucol[i] = dim;
            dim += 1;
        }
    }
    for i in 0..n {
        if sigma[i] == 0 {
            scol[i] = dim;
            dim += 1;
        }
    }
    for i in 0..n {
        if pi[i] != 1 {
            vcol[i] = dim;
            dim += 1;
        }
    }

    let mut a = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    // Stationarity rows: H u + c + beta M s + nu = 0.
    for i in 0..n {
        let mut b = -model.c[i];
        for j in 0..n {
            let hij = model.h[i * n + j];
            if pi[j] == 1 {
                a[i * dim + ucol[j]] += hij;
            } else {
                b -= hij * bound_of(pi[j], lo, hi);
            }
            let mij = model.m[i * n + j];
            if sigma[j] == 0 {
                a[i * dim + scol[j]] += beta * mij;
            } else {
                b -= beta * mij * f64::from(sigma[j]);
            }
        }
        if pi[i] != 1 {
            a[i * dim + vcol[i]] += 1.0;
        }
        rhs[i] = b;
    }
    // (M u)_z = 0 rows for the zero-sign set.
    let mut row = n;
    for z in 0..n {
        if sigma[z] != 0 {
            continue;
        }
        let mut b = 0.0;
        for j in 0..n {
            let mzj = model.m[z * n + j];
            if pi[j] == 1 {
                a[row * dim + ucol[j]] += mzj;
            } else {
                b -= mzj * bound_of(pi[j], lo, hi);
            }
        }
        rhs[row] = b;
        row += 1;
    }
    debug_assert_eq!(row, dim);

    let piv = lu_factor(&mut a, dim)?;
    lu_solve(&a, dim, &piv, &mut rhs);
    if rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut u = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut nu = vec![0.0; n];
    for i in 0..n {
        u[i] = if pi[i] == 1 {
            rhs[ucol[i]]
        } else {
            bound_of(pi[i], lo, hi)
        };
        s[i] = if sigma[i] == 0 {
            rhs[scol[i]]
        } else {
            f64::from(sigma[i])
        };
        nu[i] = if pi[i] != 1 { rhs[vcol[i]] } else { 0.0 };
    }

    let mut viol = 0.0f64;
    for i in 0..n {
        if pi[i] == 1 {
            viol = viol.max(lo - u[i]).max(u[i] - hi);
        }
        if sigma[i] == 0 {
            viol = viol.max(s[i].abs() - 1.0);
        }
        match pi[i] {
            0 => viol = viol.max(nu[i]),  // at the lower bound: nu <= 0
            2 => viol = viol.max(-nu[i]), // at the upper bound: nu >= 0
            _ => {}
        }
    }
    let n_dim = n;
    let mut mu = vec![0.0; n_dim];
    dense_matvec(&model.m, n, &u, &mut mu);
    for i in 0..n {
        if sigma[i] == 0 {
            viol = viol.max(mu[i].abs());
        } else {
            viol = viol.max(-f64::from(sigma[i]) * mu[i]);
        }
    }
    let mut hu = vec![0.0; n];
    dense_matvec(&model.h, n, &u, &mut hu);
    let mut ms = vec![0.0; n];
    dense_matvec(&model.m, n, &s, &mut ms);
    for i in 0..n {
        let r = hu[i] + model.c[i] + beta * ms[i] + nu[i];
        viol = viol.max(r.abs());
    }

    if viol <= KKT_SLACK {
        Some((u, viol))
    } else {
        None
    }
}

fn decode_ternary(mut idx: usize, digits: &mut [u8]) {
    for d in digits.iter_mut().rev() {
        *d = (idx % 3) as u8;
        idx /= 3;
    }
}

/// Exact minimizer by enumerating sign patterns of M u and activity patterns
/// of u, solving each pattern's linear KKT system densely, and keeping the
/// verified pattern with the lowest objective (ties resolved by enumeration
/// order, which is lexicographic).
pub fn enumerate_solve(spec: &ProblemSpec) -> Result<OracleSolution, OracleError> {
    let n = spec.n_dof();
    if n > ENUMERATE_MAX_DOF {
        return Err(OracleError::TooLarge {
            n_dof: n,
            limit: ENUMERATE_MAX_DOF,
        });
    }
    let model = reduced_model(spec)?;
    let beta = spec.beta;
    let (lo, hi) = (spec.bounds.lo(), spec.bounds.hi());
    let pow3 = 3usize.pow(n as u32);
    let mut sigma_digits = vec![0u8; n];
    let mut sigma = vec![0i8; n];
    let mut pi = vec![0u8; n];
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for sidx in 0..pow3 {
        decode_ternary(sidx, &mut sigma_digits);
        for i in 0..n {
            sigma[i] = sigma_digits[i] as i8 - 1;
        }
        for pidx in 0..pow3 {
            decode_ternary(pidx, &mut pi);
            if let Some((u, cert)) = try_pattern(&model, beta, lo, hi, &sigma, &pi) {
                let (j, _, _) = model.eval(beta, &u);
                let better = match &best {
                    Some((jb, _, _)) => j < *jb,
                    None => true,
                };
                if better {
                    best = Some((j, u, cert));
                }
            }
        }
    }
    let (objective, u_star, certificate) = best.ok_or(OracleError::NoVerifiedPattern)?;
    Ok(OracleSolution {
        u_star,
        objective,
        method: OracleMethod::Enumeration,
        certificate,
    })
}

/// Smallest beta with u* = 0: the sup norm of K^{-1} M (K^{-1} M yr - yd),
/// which equals the M-inverse image of the smooth gradient at u = 0.
pub fn beta_max(spec: &ProblemSpec) -> Result<f64, OracleError> {
    let n = spec.n_dof();
    let k = &spec.ops.stiffness;
    let diag = k.diagonal();
    let solve = |rhs: &[f64]| -> Option<Vec<f64>> {
        let (x, stats) = cg_solve(
            |v: &[f64], out: &mut [f64]| k.matvec_into(v, out),
            rhs,
            1e-13,
            (10 * n).max(200),
            Some(&diag),
            None,
        );
        if stats.relative_residual.is_finite() {
            Some(x)
        } else {
            None
        }
    };
    let m_yr = spec.ops.mass.matvec(&spec.yr);
    let t = solve(&m_yr).ok_or(OracleError::SingularOperator)?;
    let e: Vec<f64> = (0..n).map(|i| t[i] - spec.yd[i]).collect();
    let me = spec.ops.mass.matvec(&e);
    let w = solve(&me).ok_or(OracleError::SingularOperator)?;
    Ok(w.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
}

/// Projected subgradient descent with step c/sqrt(k) from u = 0, keeping the
/// best objective seen. Deterministic; exists to validate meshes beyond the
/// enumeration limit.
pub fn subgradient_solve(
    spec: &ProblemSpec,
    iters: usize,
    u_main: Option<&[f64]>,
) -> Result<OracleSolution, OracleError> {
    let n = spec.n_dof();
    if n > SUBGRADIENT_MAX_DOF {
        return Err(OracleError::TooLarge {
            n_dof: n,
            limit: SUBGRADIENT_MAX_DOF,
        });
    }
    if iters < SUBGRADIENT_MIN_ITERS {
        return Err(OracleError::TooFewIterations {
            iters,
            minimum: SUBGRADIENT_MIN_ITERS,
        });
    }
    if let Some(um) = u_main {
        if um.len() != n {
            return Err(OracleError::LengthMismatch {
                got: um.len(),
                expected: n,
            });
        }
    }
    let model = reduced_model(spec)?;
    let beta = spec.beta;
    let h = &model.h;
    let lip = extreme_eigenvalue(
        |x: &[f64], out: &mut [f64]| dense_matvec(h, n, x, out),
        n,
        EigSide::Largest,
        1e-6,
    )
    .map_err(|_| OracleError::SingularOperator)?;
    let step0 = 1.0 / (1.0 + lip.max(0.0));

    let mut u = vec![0.0; n];
    let mut best_u = u.clone();
    let mut best_j = f64::INFINITY;
    let mut sum_step = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut g = vec![0.0; n];
    let mut msg = vec![0.0; n];
    let mut sg = vec![0.0; n];
    for k in 1..=iters {
        let (j, hu, mu) = model.eval(beta, &u);
        if j < best_j {
            best_j = j;
            best_u.copy_from_slice(&u);
        }
        for i in 0..n {
            sg[i] = if mu[i] > 0.0 {
                1.0
            } else if mu[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        dense_matvec(&model.m, n, &sg, &mut msg);
        for i in 0..n {
            g[i] = hu[i] + model.c[i] + beta * msg[i];
        }
        let step = step0 / (k as f64).sqrt();
        sum_step += step;
        sum_sq += step * step * dot(&g, &g);
        for i in 0..n {
            u[i] = spec.bounds.clamp(u[i] - step * g[i]);
        }
    }
    let (j_final, _, _) = model.eval(beta, &u);
    if j_final < best_j {
        best_j = j_final;
        best_u = u;
    }

    let certificate = match u_main {
        Some(um) => {
            let (jm, _, _) = model.eval(beta, um);
            best_j - jm
        }
        None => {
            // Classical diminishing-step bound:
            // min_k J(u_k) - J* <= (R^2 + sum step^2 |g|^2) / (2 sum step).
            let r = spec.bounds.width() * (n as f64).sqrt();
            (r * r + sum_sq) / (2.0 * sum_step)
        }
    };
    Ok(OracleSolution {
        u_star: best_u,
        objective: best_j,
        method: OracleMethod::Subgradient,
        certificate,
    })
}
