//! Small dense linear algebra helpers.
//!
//! Every inversion of a symmetric positive definite matrix goes through
//! [`spd_cholesky`], which retries once with a diagonal jitter of
//! `1e-8 * trace / d` before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, VbError};

const JITTER_SCALE: f64 = 1e-8;

/// Cholesky factorization with a single jittered retry.
pub fn spd_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(VbError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(VbError::Numerical("non-finite entry in SPD matrix".into()));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let d = m.nrows();
    let jitter = JITTER_SCALE * m.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let mut shifted = m.clone();
    for i in 0..d {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or_else(|| {
        VbError::Numerical(format!("Cholesky factorization failed for a {d}x{d} matrix after jitter"))
    })
}

/// Inverse of an SPD matrix, symmetrized so the result is exactly symmetric.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let inv = spd_cholesky(m)?.inverse();
    Ok(symmetrize(inv))
}

/// Log-determinant of an SPD matrix.
pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = spd_cholesky(m)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// Singular value decomposition with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Thin SVD computed with faer, which stays accurate on exactly rank-deficient input.
pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SortedSvd {
            u: DMatrix::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(VbError::Numerical("non-finite entry in SVD input".into()));
    }
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm
        .thin_svd()
        .map_err(|e| VbError::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut u_sorted = DMatrix::zeros(rows, k);
    let mut v_sorted = DMatrix::zeros(cols, k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..rows {
            u_sorted[(i, dst)] = u[(i, src)];
        }
        for i in 0..cols {
            v_sorted[(i, dst)] = v[(i, src)];
        }
        s_sorted[dst] = s[src];
    }
    Ok(SortedSvd {
        u: u_sorted,
        singular_values: s_sorted,
        v: v_sorted,
    })
}

/// Moore-Penrose pseudo-inverse; singular values below `rel_tol * sigma_max` are treated as zero.
/// Returns the pseudo-inverse and the numerical rank.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = sorted_svd(m)?;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * sigma_max;
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            pinv += (svd.v.column(k) / s) * svd.u.column(k).transpose();
        }
    }
    Ok((pinv, rank))
}

/// Mean of the squared elementwise differences between two equally sized slices.
pub fn mean_squared_difference(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
