//! Sparse storage and iterative solvers.
//!
//! The solvers are deliberately simple: Jacobi-preconditioned conjugate
//! gradients for the SPD systems, Jacobi-preconditioned BiCGStab for the
//! nonsymmetric linearized systems, and a damped Newton driver for the
//! initial-mesh nonlinear solves. Convergence is always measured as the true
//! relative residual `|b - A x| / |b|` in the 2-norm.

use std::sync::Arc;

use crate::assembly::{assemble_linearized, nonlinear_residual};
use crate::fespace::{FeFunction, FeSpace};
use crate::problems::NonlinearProblem;
use crate::quadrature::TriangleRule;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("zero or missing diagonal at row {row}: Jacobi preconditioner undefined")]
    ZeroDiagonal { row: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("dimension mismatch: matrix is {n}x{n}, vector has length {len}")]
    DimensionMismatch { n: usize, len: usize },
    #[error("Krylov breakdown after {iterations} iterations (residual {residual})")]
    Breakdown { iterations: usize, residual: f64 },
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from unsorted triplets; duplicate entries are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> CsrMatrix {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            debug_assert!(i < n && j < n);
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] = col_idx.len();
                last = Some((i, j));
            }
        }
        // Forward-fill row offsets across empty rows.
        for i in 0..n {
            if row_ptr[i + 1] < row_ptr[i] {
                row_ptr[i + 1] = row_ptr[i];
            }
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * x[*c];
            }
            out[i] = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mul_vec(x, &mut out);
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|` over all stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(*c, i)).abs());
            }
        }
        worst
    }

    /// `self + other` entrywise (same dimension required).
    pub fn add(&self, other: &CsrMatrix) -> CsrMatrix {
        debug_assert_eq!(self.n, other.n);
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for m in [self, other] {
            for i in 0..m.n {
                let (cols, vals) = m.row(i);
                for (c, v) in cols.iter().zip(vals) {
                    triplets.push((i, *c, *v));
                }
            }
        }
        CsrMatrix::from_triplets(self.n, triplets)
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative 2-norm residual (for Newton, the max-norm of the nonlinear
    /// residual).
    pub final_residual: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

fn jacobi_inverse(a: &CsrMatrix) -> Result<Vec<f64>, SolveError> {
    let diag = a.diagonal();
    diag.iter()
        .enumerate()
        .map(|(row, &d)| {
            if d == 0.0 || !d.is_finite() {
                Err(SolveError::ZeroDiagonal { row })
            } else {
                Ok(1.0 / d)
            }
        })
        .collect()
}

fn check_symmetry(a: &CsrMatrix) -> Result<(), SolveError> {
    // Sample stored entries spread over the matrix; full scan for small n.
    let n = a.n;
    let step = (n / 64).max(1);
    let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in (0..n).step_by(step) {
        let (cols, vals) = a.row(i);
        for (c, v) in cols.iter().zip(vals) {
            let diff = (v - a.get(*c, i)).abs();
            if diff > 1e-12 * scale {
                return Err(SolveError::NotSymmetric { i, j: *c, diff });
            }
        }
    }
    Ok(())
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn cg_solve(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    if b.len() != a.n {
        return Err(SolveError::DimensionMismatch { n: a.n, len: b.len() });
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(SolveError::NonFinite { context: "right-hand side" });
    }
    check_symmetry(a)?;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; a.n], SolveReport { iterations: 0, final_residual: 0.0, converged: true }));
    }
    let minv = jacobi_inverse(a)?;

    let mut x = vec![0.0; a.n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; a.n];

    for iter in 1..=max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(SolveError::Breakdown { iterations: iter, residual: norm(&r) / b_norm });
        }
        let alpha = rz / pap;
        for i in 0..a.n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm(&r) / b_norm;
        if rel <= tol {
            return Ok((x, SolveReport { iterations: iter, final_residual: rel, converged: true }));
        }
        for i in 0..a.n {
            z[i] = r[i] * minv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..a.n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm(&r) / b_norm;
    Ok((x, SolveReport { iterations: max_iter, final_residual: rel, converged: rel <= tol }))
}

/// Jacobi-preconditioned BiCGStab for general (nonsymmetric) systems.
pub fn bicgstab_solve(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    if b.len() != a.n {
        return Err(SolveError::DimensionMismatch { n: a.n, len: b.len() });
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(SolveError::NonFinite { context: "right-hand side" });
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; a.n], SolveReport { iterations: 0, final_residual: 0.0, converged: true }));
    }
    let minv = jacobi_inverse(a)?;
    let n = a.n;

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];

    for iter in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(SolveError::Breakdown { iterations: iter, residual: norm(&r) / b_norm });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        for i in 0..n {
            phat[i] = p[i] * minv[i];
        }
        a.mul_vec(&phat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            return Err(SolveError::Breakdown { iterations: iter, residual: norm(&r) / b_norm });
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / b_norm <= tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            let true_res = residual_norm(a, &x, b) / b_norm;
            return Ok((x, SolveReport { iterations: iter, final_residual: true_res, converged: true_res <= tol * 10.0 }));
        }
        for i in 0..n {
            shat[i] = s[i] * minv[i];
        }
        a.mul_vec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(SolveError::Breakdown { iterations: iter, residual: norm(&s) / b_norm });
        }
        omega = dot(&t, &s) / tt;
        if omega.abs() < 1e-300 {
            return Err(SolveError::Breakdown { iterations: iter, residual: norm(&s) / b_norm });
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if !r.iter().all(|ri| ri.is_finite()) {
            return Err(SolveError::NonFinite { context: "BiCGStab residual" });
        }
        let rel = norm(&r) / b_norm;
        if rel <= tol {
            // Guard against drift of the recursive residual.
            let true_res = residual_norm(a, &x, b) / b_norm;
            if true_res <= tol * 10.0 {
                return Ok((x, SolveReport { iterations: iter, final_residual: true_res, converged: true }));
            }
        }
    }
    let rel = residual_norm(a, &x, b) / b_norm;
    Ok((x, SolveReport { iterations: max_iter, final_residual: rel, converged: rel <= tol }))
}

fn residual_norm(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    let mut s = 0.0;
    for i in 0..b.len() {
        let d = b[i] - ax[i];
        s += d * d;
    }
    s.sqrt()
}

/// Damped Newton iteration for the nonlinear Galerkin system of `problem`.
///
/// Each step solves the linearized system assembled at the current iterate and
/// halves the step (up to 10 times) whenever the max-norm residual would
/// increase. Convergence means `|residual|_inf <= tol`.
pub fn newton_solve(
    space: &Arc<FeSpace>,
    problem: &NonlinearProblem,
    initial: FeFunction,
    tol: f64,
    max_iter: usize,
    rule: &TriangleRule,
) -> Result<(FeFunction, SolveReport), SolveError> {
    let mut w = initial;
    let mut res = nonlinear_residual(space, &w, problem, rule);
    let mut res_norm = norm_inf(&res);
    if !res_norm.is_finite() {
        return Err(SolveError::NonFinite { context: "nonlinear residual" });
    }
    if space.n_dofs() == 0 || res_norm <= tol {
        return Ok((w, SolveReport { iterations: 0, final_residual: res_norm, converged: true }));
    }

    let inner_tol = (0.01 * tol).max(1e-14);
    for iter in 1..=max_iter {
        let jac = assemble_linearized(space, &w, problem, rule);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let (delta, lin_report) = bicgstab_solve(&jac, &rhs, inner_tol, 10 * jac.n().max(10))?;
        if !lin_report.converged {
            return Ok((w, SolveReport { iterations: iter, final_residual: res_norm, converged: false }));
        }
        let step = FeFunction::from_coeffs(space, delta).expect("solver preserves length");

        let mut lambda = 1.0;
        let mut best: Option<(FeFunction, Vec<f64>, f64)> = None;
        for _ in 0..=10 {
            let mut trial = w.clone();
            trial.axpy(lambda, &step).expect("same space");
            let trial_res = nonlinear_residual(space, &trial, problem, rule);
            let trial_norm = norm_inf(&trial_res);
            if trial_norm.is_finite() && trial_norm < res_norm {
                best = Some((trial, trial_res, trial_norm));
                break;
            }
            if best.is_none() && trial_norm.is_finite() {
                best = Some((trial, trial_res, trial_norm));
            }
            lambda *= 0.5;
        }
        let Some((next_w, next_res, next_norm)) = best else {
            return Err(SolveError::NonFinite { context: "Newton line search" });
        };
        w = next_w;
        res = next_res;
        res_norm = next_norm;
        if res_norm <= tol {
            return Ok((w, SolveReport { iterations: iter, final_residual: res_norm, converged: true }));
        }
    }
    Ok((w, SolveReport { iterations: max_iter, final_residual: res_norm, converged: false }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(n: usize, entries: &[(usize, usize, f64)]) -> CsrMatrix {
        CsrMatrix::from_triplets(n, entries.to_vec())
    }

    #[test]
    fn csr_from_triplets_sums_duplicates() {
        let a = dense(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 5.0), (0, 1, -1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(0, 1), -1.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.get(1, 1), 5.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn cg_identity_converges_immediately() {
        let a = dense(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        let b = vec![3.0, -1.0, 0.5];
        let (x, report) = cg_solve(&a, &b, 1e-12, 100).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_two_by_two_hand_solve() {
        let a = dense(2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let (x, report) = cg_solve(&a, &[1.0, 2.0], 1e-12, 100).unwrap();
        assert!(report.converged);
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn cg_zero_rhs() {
        let a = dense(2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let (x, report) = cg_solve(&a, &[0.0, 0.0], 1e-12, 100).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn cg_rejects_nonsymmetric() {
        let a = dense(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 1, 1.0)]);
        assert!(matches!(
            cg_solve(&a, &[1.0, 1.0], 1e-10, 10),
            Err(SolveError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn cg_error_decreases_in_a_norm() {
        // Random-ish SPD system with known solution; the CG iterates must be
        // monotone in the A-norm of the error.
        let n = 10;
        let mut triplets = Vec::new();
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut rand = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = vec![vec![0.0f64; n]; n];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rand();
            }
        }
        // A = M^T M + n I is SPD.
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += m[k][i] * m[k][j];
                }
                if i == j {
                    s += n as f64;
                }
                triplets.push((i, j, s));
            }
        }
        let a = CsrMatrix::from_triplets(n, triplets);
        let x_star: Vec<f64> = (0..n).map(|i| (i as f64 - 4.5) / 3.0).collect();
        let b = a.matvec(&x_star);

        let a_norm_err = |x: &[f64]| {
            let e: Vec<f64> = x.iter().zip(&x_star).map(|(xi, si)| xi - si).collect();
            dot(&e, &a.matvec(&e)).sqrt()
        };
        let mut last = a_norm_err(&vec![0.0; n]);
        for k in 1..=n {
            let (x, _) = cg_solve(&a, &b, 1e-30, k).unwrap();
            let err = a_norm_err(&x);
            assert!(err <= last * (1.0 + 1e-12), "A-norm error rose at iteration {k}");
            last = err;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn bicgstab_upper_triangular() {
        let a = dense(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 2.0)]);
        let (x, report) = bicgstab_solve(&a, &[3.0, 2.0], 1e-12, 100).unwrap();
        assert!(report.converged);
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bicgstab_agrees_with_cg_on_spd() {
        let a = dense(
            3,
            &[
                (0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0),
                (1, 2, 0.5), (2, 1, 0.5), (2, 2, 5.0),
            ],
        );
        let b = [1.0, -2.0, 0.25];
        let (x1, _) = cg_solve(&a, &b, 1e-12, 100).unwrap();
        let (x2, _) = bicgstab_solve(&a, &b, 1e-12, 100).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_system_fails_loudly() {
        let a = dense(2, &[(0, 0, 1.0), (1, 1, 0.0)]);
        match bicgstab_solve(&a, &[1.0, 1.0], 1e-12, 100) {
            Err(SolveError::ZeroDiagonal { row }) => assert_eq!(row, 1),
            Ok((_, report)) => assert!(!report.converged),
            Err(_) => {}
        }
    }
}
