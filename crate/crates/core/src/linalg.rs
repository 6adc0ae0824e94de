//! Small dense linear-algebra helpers shared by the inference code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix. Empty matrices report +∞.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `m x = b` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    Ok(chol.solve(b))
}

/// Block-diagonal assembly, blocks placed in iteration order.
pub fn block_diag<'a, I>(blocks: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>> + Clone,
{
    let (rows, cols) = blocks
        .clone()
        .into_iter()
        .fold((0, 0), |(r, c), b| (r + b.nrows(), c + b.ncols()));
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Largest absolute entry; 0 for empty input.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Numerical rank from the singular values, relative tolerance `rtol`.
pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rtol * smax).count()
}
