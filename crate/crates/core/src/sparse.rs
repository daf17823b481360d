//! CSR matrices, conjugate gradients, banded Cholesky, eigenvalue estimates,
//! and the mass/Schur solves the subproblems are built from.

use crate::fem::FemOperators;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum SparseError {
    /// Cholesky hit a nonpositive pivot; the matrix is not positive definite.
    NotPositiveDefinite { row: usize },
    /// CG produced a non-finite quantity.
    Breakdown { iterations: usize },
    /// Iteration budget exhausted before the tolerance was met.
    NonConvergence {
        iterations: usize,
        relative_residual: f64,
    },
}

impl fmt::Display for SparseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparseError::NotPositiveDefinite { row } => {
                write!(f, "matrix is not positive definite (pivot at row {row})")
            }
            SparseError::Breakdown { iterations } => {
                write!(f, "iterative solve broke down after {iterations} iterations")
            }
            SparseError::NonConvergence {
                iterations,
                relative_residual,
            } => write!(
                f,
                "no convergence in {iterations} iterations (relative residual {relative_residual:.3e})"
            ),
        }
    }
}

impl std::error::Error for SparseError {}

/// Compressed sparse row matrix. Column indices are strictly increasing within
/// each row and exact zeros are dropped during finalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed and
    /// entries that cancel to exactly 0.0 are not stored.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(i, j, _) in triplets {
            assert!(i < n_rows && j < n_cols, "triplet ({i},{j}) out of bounds");
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut idx = 0;
        for row in 0..n_rows {
            while idx < sorted.len() && sorted[idx].0 == row {
                let col = sorted[idx].1;
                let mut acc = 0.0;
                while idx < sorted.len() && sorted[idx].0 == row && sorted[idx].1 == col {
                    acc += sorted[idx].2;
                    idx += 1;
                }
                if acc != 0.0 {
                    col_idx.push(col);
                    vals.push(acc);
                }
            }
            row_ptr[row + 1] = col_idx.len();
        }
        CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &triplets)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    /// Stored value at (i, j); absent entries read as 0.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "matvec dimension mismatch");
        assert_eq!(y.len(), self.n_rows, "matvec output dimension mismatch");
        for i in 0..self.n_rows {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[i][j] = v;
            }
        }
        d
    }

    /// max_ij |A_ij − A_ji|; 0.0 exactly for symmetric assembly.
    pub fn max_asymmetry(&self) -> f64 {
        assert_eq!(self.n_rows, self.n_cols);
        let mut worst: f64 = 0.0;
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Triplet view in row-major order, for serialization.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out.push((i, j, v));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// After this many iterations without the recursive residual improving, the
/// solve is considered stagnated at its double-precision floor.
const STALL_WINDOW: usize = 60;
/// The recursive residual drifts from the true one; refresh periodically.
const RESIDUAL_REFRESH: usize = 64;

/// Preconditioned conjugate gradients on a symmetric positive definite
/// operator; `psolve` applies the preconditioner inverse. Deterministic:
/// fixed iteration order, no reductions reordering. Returns the best iterate
/// found; `converged` reflects the recomputed true residual.
pub fn pcg_solve<F, P>(
    mut apply: F,
    mut psolve: P,
    rhs: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, LinearSolveStats)
where
    F: FnMut(&[f64], &mut [f64]),
    P: FnMut(&[f64], &mut [f64]),
{
    let n = rhs.len();
    assert!(tol > 0.0, "cg tolerance must be positive");
    let bnorm = norm2(rhs);
    if bnorm == 0.0 {
        return (
            vec![0.0; n],
            LinearSolveStats {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        );
    }

    let mut x = match x0 {
        Some(v) => {
            assert_eq!(v.len(), n);
            v.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    if x0.is_some() {
        apply(&x, &mut scratch);
        for i in 0..n {
            r[i] = rhs[i] - scratch[i];
        }
    } else {
        r.copy_from_slice(rhs);
    }

    let mut z = vec![0.0; n];
    psolve(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rnorm = norm2(&r);

    let mut best_x = x.clone();
    let mut best_rnorm = rnorm;
    let mut last_improvement = 0usize;
    let mut iterations = 0usize;

    for it in 0..max_iter {
        if rnorm <= tol * bnorm {
            break;
        }
        if it.saturating_sub(last_improvement) >= STALL_WINDOW {
            break;
        }
        apply(&p, &mut scratch);
        let pap = dot(&p, &scratch);
        if !pap.is_finite() || pap <= 0.0 {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
        }
        if (it + 1) % RESIDUAL_REFRESH == 0 {
            let mut ax = vec![0.0; n];
            apply(&x, &mut ax);
            for i in 0..n {
                r[i] = rhs[i] - ax[i];
            }
        } else {
            for i in 0..n {
                r[i] -= step * scratch[i];
            }
        }
        iterations = it + 1;
        rnorm = norm2(&r);
        if !rnorm.is_finite() {
            break;
        }
        if rnorm < best_rnorm {
            if rnorm < 0.9999 * best_rnorm {
                last_improvement = it;
            }
            best_rnorm = rnorm;
            best_x.copy_from_slice(&x);
        }
        psolve(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    // Recompute the true residual once; the recursion drifts near the floor.
    apply(&best_x, &mut scratch);
    for i in 0..n {
        scratch[i] = rhs[i] - scratch[i];
    }
    let true_rel = norm2(&scratch) / bnorm;
    let stats = LinearSolveStats {
        iterations,
        relative_residual: true_rel,
        converged: true_rel.is_finite() && true_rel <= tol,
    };
    (best_x, stats)
}

/// Conjugate gradients with an optional diagonal preconditioner.
pub fn cg_solve<F>(
    apply: F,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
    precond: Option<&[f64]>,
    x0: Option<&[f64]>,
) -> (Vec<f64>, LinearSolveStats)
where
    F: FnMut(&[f64], &mut [f64]),
{
    match precond {
        Some(d) => {
            assert_eq!(d.len(), rhs.len(), "preconditioner length mismatch");
            assert!(
                d.iter().all(|&v| v > 0.0),
                "diagonal preconditioner must be positive"
            );
            pcg_solve(
                apply,
                |r: &[f64], z: &mut [f64]| {
                    for i in 0..r.len() {
                        z[i] = r[i] / d[i];
                    }
                },
                rhs,
                x0,
                tol,
                max_iter,
            )
        }
        None => pcg_solve(
            apply,
            |r: &[f64], z: &mut [f64]| z.copy_from_slice(r),
            rhs,
            x0,
            tol,
            max_iter,
        ),
    }
}

/// Lower-triangular Cholesky factor of a banded SPD matrix, stored packed:
/// row i keeps L[i][j] for j in [i-bandwidth, i].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, SparseError> {
        assert_eq!(a.n_rows(), a.n_cols(), "banded Cholesky needs a square matrix");
        let n = a.n_rows();
        let mut bandwidth = 0usize;
        for i in 0..n {
            let (cols, _) = a.row(i);
            for &j in cols {
                bandwidth = bandwidth.max(i.abs_diff(j));
            }
        }
        let stride = bandwidth + 1;
        let mut data = vec![0.0; n * stride];
        // data[i*stride + (j - i + bandwidth)] holds L[i][j].
        let at = |i: usize, j: usize| i * stride + (j + bandwidth - i);
        for i in 0..n {
            let lo = i.saturating_sub(bandwidth);
            let mut arow = vec![0.0; i - lo + 1];
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j >= lo && j <= i {
                    arow[j - lo] = v;
                }
            }
            for j in lo..=i {
                let mut sum = arow[j - lo];
                let klo = lo.max(j.saturating_sub(bandwidth));
                for k in klo..j {
                    sum -= data[at(i, k)] * data[at(j, k)];
                }
                if j < i {
                    data[at(i, j)] = sum / data[at(j, j)];
                } else {
                    if !(sum > 0.0) {
                        return Err(SparseError::NotPositiveDefinite { row: i });
                    }
                    data[at(i, i)] = sum.sqrt();
                }
            }
        }
        Ok(BandedCholesky {
            n,
            bandwidth,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Solves A x = b via the factor; b is overwritten with x.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let bw = self.bandwidth;
        let stride = bw + 1;
        let at = |i: usize, j: usize| i * stride + (j + bw - i);
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            let mut sum = b[i];
            for k in lo..i {
                sum -= self.data[at(i, k)] * b[k];
            }
            b[i] = sum / self.data[at(i, i)];
        }
        for i in (0..self.n).rev() {
            let hi = (i + bw).min(self.n - 1);
            let mut sum = b[i];
            for k in (i + 1)..=hi {
                sum -= self.data[at(k, i)] * b[k];
            }
            b[i] = sum / self.data[at(i, i)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Mass solve to a caller-chosen tolerance: CG preconditioned by the lumped
/// diagonal (mesh-independent condition number, O(1) iterations).
pub fn mass_solve_tol(
    ops: &FemOperators,
    rhs: &[f64],
    tol: f64,
    x0: Option<&[f64]>,
) -> (Vec<f64>, LinearSolveStats) {
    let n = ops.n_dof();
    assert_eq!(rhs.len(), n, "mass_solve rhs length mismatch");
    let max_iter = 10 * n.max(40);
    cg_solve(
        |v: &[f64], out: &mut [f64]| ops.mass.matvec_into(v, out),
        rhs,
        tol,
        max_iter,
        Some(&ops.lumped),
        x0,
    )
}

/// Applies M^{-1} to relative residual 1e-12.
pub fn mass_solve(ops: &FemOperators, rhs: &[f64]) -> Result<Vec<f64>, SparseError> {
    let (x, stats) = mass_solve_tol(ops, rhs, 1e-12, None);
    if stats.converged {
        Ok(x)
    } else {
        Err(SparseError::NonConvergence {
            iterations: stats.iterations,
            relative_residual: stats.relative_residual,
        })
    }
}

/// One application of the p-subproblem operator: (K M^{-1} K + (1/alpha) M) p,
/// with the inner mass solve at tolerance 1e-13.
pub fn schur_apply(ops: &FemOperators, alpha: f64, p: &[f64]) -> Vec<f64> {
    assert!(alpha > 0.0, "alpha must be positive");
    let kp = ops.stiffness.matvec(p);
    let (minv_kp, _) = mass_solve_tol(ops, &kp, 1e-13, None);
    let k_minv_kp = ops.stiffness.matvec(&minv_kp);
    let mp = ops.mass.matvec(p);
    k_minv_kp
        .iter()
        .zip(&mp)
        .map(|(a, b)| a + b / alpha)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigSide {
    Largest,
    Smallest,
}

/// Extreme eigenvalue of a symmetric positive semidefinite operator: power
/// iteration for the largest, inverse iteration (via cg_solve) for the
/// smallest. `tol` is the relative Rayleigh-quotient stagnation tolerance.
pub fn extreme_eigenvalue<F>(
    mut apply: F,
    n: usize,
    side: EigSide,
    tol: f64,
) -> Result<f64, SparseError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    assert!(n > 0);
    assert!(tol > 0.0);
    let max_iter = 100_000usize;
    // Deterministic start with energy in all coordinates.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) + 1.0).sin()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; n];
    let mut rho_prev = f64::NAN;
    for it in 0..max_iter {
        match side {
            EigSide::Largest => {
                apply(&v, &mut w);
            }
            EigSide::Smallest => {
                let (sol, stats) = cg_solve(&mut apply, &v, 1e-13, 50 * n, None, None);
                if !stats.relative_residual.is_finite() {
                    return Err(SparseError::Breakdown { iterations: it });
                }
                w.copy_from_slice(&sol);
            }
        }
        let wnorm = norm2(&w);
        if wnorm == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= wnorm);
        // Rayleigh quotient of the current direction.
        let mut aw = vec![0.0; n];
        apply(&w, &mut aw);
        let rho = dot(&w, &aw);
        if !rho.is_finite() {
            return Err(SparseError::Breakdown { iterations: it });
        }
        if it > 0 && (rho - rho_prev).abs() <= tol * rho.abs().max(f64::MIN_POSITIVE) {
            return Ok(rho);
        }
        rho_prev = rho;
        v.copy_from_slice(&w);
    }
    Err(SparseError::NonConvergence {
        iterations: max_iter,
        relative_residual: f64::NAN,
    })
}
