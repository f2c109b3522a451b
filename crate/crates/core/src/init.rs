//! Informative starting points from a sparse principal components decomposition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VbError};
use crate::linalg;
use crate::model::{
    cumulative_tau, prior_precision, Dataset, FaHyperParams, FaState, GammaFactor, GaussianFactor,
    MsfaHyperParams, MsfaState, MultiStudyDataset, ShrinkagePrior,
};
use crate::shrinkage;

const PSI_FLOOR: f64 = 1e-6;
const PINV_TOL: f64 = 1e-10;
const MAX_REFINE: usize = 100;

/// `x ~ scores * loadings^T` with `scores^T scores / (N - 1) = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePcaResult {
    pub loadings: DMatrix<f64>,
    pub scores: DMatrix<f64>,
}

fn sample_denominator(n: usize) -> f64 {
    n.saturating_sub(1).max(1) as f64
}

/// Truncated SVD followed, when `sparsity > 0`, by alternating soft-thresholding
/// of the loadings and an orthogonal refit of the scores.
///
/// The result is deterministic. Each loading column is signed so that its
/// largest-magnitude entry is positive.
pub fn sparse_pca(x: &DMatrix<f64>, d: usize, sparsity: f64) -> Result<SparsePcaResult> {
    let (n, p) = x.shape();
    if d > n.min(p) {
        return Err(VbError::Dimension(format!(
            "cannot extract {d} components from a {n}x{p} matrix"
        )));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(VbError::Config(format!("sparsity must lie in [0, 1), got {sparsity}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VbError::Precondition("input contains NaN or infinite entries".into()));
    }
    let denom = sample_denominator(n);
    let root = denom.sqrt();
    let svd = linalg::sorted_svd(x)?;
    let mut scores = svd.u.columns(0, d) * root;
    let mut loadings = svd.v.columns(0, d) * DMatrix::from_diagonal(&svd.singular_values.rows(0, d)) / root;

    if sparsity > 0.0 && d > 0 {
        for _ in 0..MAX_REFINE {
            let target = x.transpose() * &scores / denom;
            let next = soft_threshold_to_quantile(&target, sparsity);
            let change = (&next - &loadings).norm();
            let scale = next.norm().max(1.0);
            loadings = next;
            scores = polar_factor(&(x * &loadings))? * root;
            if change <= 1e-10 * scale {
                break;
            }
        }
    }

    for j in 0..d {
        let col = loadings.column(j);
        let pivot = col.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            loadings.column_mut(j).neg_mut();
            scores.column_mut(j).neg_mut();
        }
    }
    Ok(SparsePcaResult { loadings, scores })
}

fn soft_threshold_to_quantile(m: &DMatrix<f64>, sparsity: f64) -> DMatrix<f64> {
    let mut magnitudes: Vec<f64> = m.iter().map(|v| v.abs()).collect();
    magnitudes.sort_by(f64::total_cmp);
    let count = ((sparsity * magnitudes.len() as f64).ceil() as usize).clamp(1, magnitudes.len());
    let threshold = magnitudes[count - 1];
    m.map(|v| v.signum() * (v.abs() - threshold).max(0.0))
}

/// Orthonormal factor `U V^T` of the thin SVD.
fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = linalg::sorted_svd(m)?;
    Ok(svd.u * svd.v.transpose())
}

/// Runs [`sparse_pca`] with as many components as the data allow and pads the
/// rest with zero columns.
fn padded_sparse_pca(x: &DMatrix<f64>, d: usize, sparsity: f64) -> Result<SparsePcaResult> {
    let (n, p) = x.shape();
    let usable = d.min(n).min(p);
    let fit = sparse_pca(x, usable, sparsity)?;
    if usable == d {
        return Ok(fit);
    }
    let mut loadings = DMatrix::zeros(p, d);
    let mut scores = DMatrix::zeros(n, d);
    loadings.columns_mut(0, usable).copy_from(&fit.loadings);
    scores.columns_mut(0, usable).copy_from(&fit.scores);
    Ok(SparsePcaResult { loadings, scores })
}

/// Per-variable variance of `X - sum of T L^T` over the given `(scores, loadings)`
/// parts, floored to keep rates positive.
fn residual_variances(x: &DMatrix<f64>, parts: &[(DMatrix<f64>, &DMatrix<f64>)]) -> DVector<f64> {
    let denom = sample_denominator(x.nrows());
    let mut resid = x.clone();
    for (scores, loadings) in parts {
        resid -= scores * loadings.transpose();
    }
    DVector::from_iterator(
        x.ncols(),
        resid.column_iter().map(|c| (c.norm_squared() / denom).max(PSI_FLOOR)),
    )
}

fn loading_rows(
    means: &DMatrix<f64>,
    prior: &ShrinkagePrior,
    omega: &[Vec<GammaFactor>],
    delta: &[GammaFactor],
) -> Vec<GaussianFactor> {
    let taus = cumulative_tau(delta);
    (0..means.nrows())
        .map(|p| {
            let precision = prior_precision(&omega[p], &taus);
            debug_assert_eq!(precision.len(), prior.truncation);
            GaussianFactor {
                mean: means.row(p).transpose(),
                cov: DMatrix::from_diagonal(&precision.map(|v| 1.0 / v)),
            }
        })
        .collect()
}

/// `(I + sum_p E[psi_p^-2] E[row_p row_p^T])^-1` for a set of loading rows.
pub(crate) fn shared_score_cov(rows: &[GaussianFactor], psi: &[GammaFactor], d: usize) -> Result<DMatrix<f64>> {
    let mut precision = DMatrix::identity(d, d);
    for (g, w) in rows.iter().zip(psi) {
        precision += g.second_moment() * w.mean();
    }
    linalg::spd_inverse(&precision)
}

fn score_factors(means: &DMatrix<f64>, cov: &DMatrix<f64>) -> Vec<GaussianFactor> {
    means
        .row_iter()
        .map(|r| GaussianFactor {
            mean: r.transpose(),
            cov: cov.clone(),
        })
        .collect()
}

fn psi_factors(a_psi: f64, n: usize, residual: &DVector<f64>) -> Vec<GammaFactor> {
    let alpha = a_psi + 0.5 * n as f64;
    residual.iter().map(|r| GammaFactor { alpha, beta: alpha * r }).collect()
}

/// Initial single-study state. `sparsity` is the target fraction of exact
/// zeros in the initial loadings.
pub fn init_fa(data: &Dataset, hyper: &FaHyperParams, sparsity: f64) -> Result<FaState> {
    hyper.validate()?;
    data.require_centered()?;
    let (n, p) = data.dims();
    let j = hyper.j_star;
    let pca = padded_sparse_pca(&data.x, j, sparsity)?;
    let prior = hyper.shrinkage();
    let (omega, delta) = shrinkage::prior_factors(&prior, p);
    let psi = psi_factors(hyper.a_psi, n, &residual_variances(&data.x, &[(pca.scores.clone(), &pca.loadings)]));
    let loadings = loading_rows(&pca.loadings, &prior, &omega, &delta);
    let cov = shared_score_cov(&loadings, &psi, j)?;
    Ok(FaState {
        hyper: *hyper,
        loadings,
        scores: score_factors(&pca.scores, &cov),
        psi,
        omega,
        delta,
    })
}

/// `X (I - Phi (Phi^T Phi)^+ Phi^T)`: the part of `x` outside the span of `phi`.
pub fn projection_residual(x: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi.ncols() == 0 {
        return Ok(x.clone());
    }
    let (gram_pinv, _) = linalg::pseudo_inverse(&(phi.transpose() * phi), PINV_TOL)?;
    Ok(x - (x * phi) * gram_pinv * phi.transpose())
}

/// Initial multi-study state: shared components from the row-stacked data,
/// study-specific components from each study's residual outside the shared span.
pub fn init_msfa(data: &MultiStudyDataset, hyper: &MsfaHyperParams, sparsity: f64) -> Result<MsfaState> {
    hyper.validate()?;
    if hyper.num_studies() != data.num_studies() {
        return Err(VbError::Dimension(format!(
            "{} study priors for {} studies",
            hyper.num_studies(),
            data.num_studies()
        )));
    }
    for d in &data.studies {
        d.require_centered()?;
    }
    let p = data.p();
    let k = hyper.shared.truncation;
    let stacked = data.stacked();
    let shared = padded_sparse_pca(&stacked, k, sparsity)?;
    let (omega_shared, delta_shared) = shrinkage::prior_factors(&hyper.shared, p);
    let phi = loading_rows(&shared.loadings, &hyper.shared, &omega_shared, &delta_shared);

    let mut lambda = Vec::new();
    let mut f_scores = Vec::new();
    let mut l_scores = Vec::new();
    let mut psi = Vec::new();
    let mut omega_specific = Vec::new();
    let mut delta_specific = Vec::new();
    let mut offset = 0;
    for (s, study) in data.studies.iter().enumerate() {
        let n = study.n();
        let prior = &hyper.per_study[s];
        let residual = projection_residual(&study.x, &shared.loadings)?;
        let specific = padded_sparse_pca(&residual, prior.truncation, sparsity)?;
        let (omega, delta) = shrinkage::prior_factors(prior, p);
        let rows = loading_rows(&specific.loadings, prior, &omega, &delta);
        let psi_s = psi_factors(
            hyper.a_psi,
            n,
            &residual_variances(
                &study.x,
                &[
                    (shared.scores.rows(offset, n).into_owned(), &shared.loadings),
                    (specific.scores.clone(), &specific.loadings),
                ],
            ),
        );
        let f_cov = shared_score_cov(&phi, &psi_s, k)?;
        let l_cov = shared_score_cov(&rows, &psi_s, prior.truncation)?;
        f_scores.push(score_factors(&shared.scores.rows(offset, n).into_owned(), &f_cov));
        l_scores.push(score_factors(&specific.scores, &l_cov));
        lambda.push(rows);
        psi.push(psi_s);
        omega_specific.push(omega);
        delta_specific.push(delta);
        offset += n;
    }
    Ok(MsfaState {
        hyper: hyper.clone(),
        phi,
        lambda,
        f_scores,
        l_scores,
        psi,
        omega_shared,
        delta_shared,
        omega_specific,
        delta_specific,
    })
}
