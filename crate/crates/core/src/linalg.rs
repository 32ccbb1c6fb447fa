//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{GaplmError, Result};

/// Relative eigenvalue cutoff used by the pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-10;

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
pub fn pinv_symmetric(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let cutoff = rcond * max_abs;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cutoff && ev != 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / ev;
        }
    }
    out
}

/// Cholesky factorisation of `m + shift*I`; if that fails the shift is
/// raised geometrically from `1e-12 * trace/dim` a handful of times.
pub fn cholesky_with_fallback(m: &DMatrix<f64>, shift: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let attempt = |s: f64| {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += s;
        }
        Cholesky::new(a)
    };
    if let Some(c) = attempt(shift) {
        return Some(c);
    }
    let scale = (trace(m).abs() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut extra = 1e-12 * scale;
    for _ in 0..8 {
        if let Some(c) = attempt(shift + extra) {
            return Some(c);
        }
        extra *= 100.0;
    }
    None
}

/// Solves the symmetric positive (semi)definite system `m x = rhs`.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = cholesky_with_fallback(m, 0.0)
        .ok_or_else(|| GaplmError::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

/// Ordinary least squares `argmin ||y - x b||` through the normal equations.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    solve_spd(&xtx, &xty, "normal-equation matrix")
}

/// Picks the rows/columns listed in `idx` out of a square matrix.
pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
