//! Coordinate ascent for single-study factor analysis.
//!
//! A sweep updates, in order, the loading rows, the idiosyncratic precisions,
//! the scores, the local shrinkage factors and the column multipliers.
//! Row, observation and column indices are 0-based.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VbError};
use crate::init::{init_fa, shared_score_cov};
use crate::linalg;
use crate::model::{
    cumulative_tau, ln_2pi, prior_precision, rows_to_matrix, Dataset, FaHyperParams, FaState, FitConfig, FitResult,
    GammaFactor, GaussianFactor, NaturalGaussian,
};
use crate::shrinkage;

/// Score moments summed over a set of observations.
pub(crate) struct ScoreStats {
    /// `sum_i (mu_i mu_i^T + Sigma_i)`.
    pub s2: DMatrix<f64>,
    /// `sum_i Sigma_i`.
    pub cov_sum: DMatrix<f64>,
    /// `X_b^T M_b`: `P x d` cross products between data and score means.
    pub xtm: DMatrix<f64>,
    /// Data rows of the set.
    pub x: DMatrix<f64>,
    /// Score means of the set, one row per observation.
    pub means: DMatrix<f64>,
}

impl ScoreStats {
    /// `rows = None` uses every observation.
    pub fn new(x: &DMatrix<f64>, scores: &[GaussianFactor], d: usize, rows: Option<&[usize]>) -> Self {
        let (xb, chosen): (DMatrix<f64>, Vec<&GaussianFactor>) = match rows {
            None => (x.clone(), scores.iter().collect()),
            Some(idx) => (x.select_rows(idx), idx.iter().map(|&i| &scores[i]).collect()),
        };
        let mut means = DMatrix::zeros(chosen.len(), d);
        let mut cov_sum = DMatrix::zeros(d, d);
        for (r, g) in chosen.iter().enumerate() {
            means.row_mut(r).copy_from(&g.mean.transpose());
            cov_sum += &g.cov;
        }
        let s2 = means.transpose() * &means + &cov_sum;
        let xtm = xb.transpose() * &means;
        Self {
            s2,
            cov_sum,
            xtm,
            x: xb,
            means,
        }
    }

    /// Expected residual sum of squares for every variable given loading factors
    /// for the same set of observations.
    pub fn expected_rss(&self, loadings: &[GaussianFactor]) -> Vec<f64> {
        let d = self.s2.nrows();
        let resid = &self.x - &self.means * rows_to_matrix(loadings, d).transpose();
        loadings
            .iter()
            .enumerate()
            .map(|(p, g)| {
                resid.column(p).norm_squared()
                    + (&self.s2 * &g.cov).trace()
                    + (g.mean.transpose() * &self.cov_sum * &g.mean)[(0, 0)]
            })
            .collect()
    }
}

/// Natural parameters of the optimal loading row given summary statistics
/// weighted by `weight`. The prior precision is not weighted.
pub(crate) fn loading_natural(
    prior_diag: &DVector<f64>,
    psi_mean: f64,
    weight: f64,
    s2: &DMatrix<f64>,
    xtm_row: DVector<f64>,
) -> NaturalGaussian {
    let mut eta1 = s2 * (psi_mean * weight);
    for j in 0..prior_diag.len() {
        eta1[(j, j)] += prior_diag[j];
    }
    NaturalGaussian {
        eta1: linalg::symmetrize(eta1),
        eta2: xtm_row * (psi_mean * weight),
    }
}

pub(crate) fn psi_factor(a_psi: f64, b_psi: f64, n: usize, weight: f64, erss: f64) -> GammaFactor {
    GammaFactor {
        alpha: a_psi + 0.5 * n as f64,
        beta: b_psi + 0.5 * weight * erss,
    }
}

/// Score means `X_b diag(E[psi^-2]) M^T Sigma` for the given data rows.
pub(crate) fn score_means(
    x_rows: &DMatrix<f64>,
    loading_means: &DMatrix<f64>,
    psi: &[GammaFactor],
    cov: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut weighted = loading_means.clone();
    for (p, mut row) in weighted.row_iter_mut().enumerate() {
        row *= psi[p].mean();
    }
    x_rows * weighted * cov
}

fn check(state: &FaState, data: &Dataset) -> Result<()> {
    state.check_dims(data)
}

fn index_check(i: usize, len: usize, what: &str) -> Result<()> {
    if i >= len {
        return Err(VbError::Dimension(format!("{what} index {i} outside 0..{len}")));
    }
    Ok(())
}

/// Optimal factor for loading row `p` given the current scores, precisions and shrinkage.
pub fn update_loadings_row(state: &FaState, data: &Dataset, p: usize) -> Result<GaussianFactor> {
    check(state, data)?;
    index_check(p, state.p(), "variable")?;
    let stats = ScoreStats::new(&data.x, &state.scores, state.j_star(), None);
    loading_natural(
        &state.prior_precision(p),
        state.psi[p].mean(),
        1.0,
        &stats.s2,
        stats.xtm.row(p).transpose(),
    )
    .to_moments()
}

/// Optimal rate of the idiosyncratic precision of variable `p`.
pub fn update_psi_rate(state: &FaState, data: &Dataset, p: usize) -> Result<f64> {
    check(state, data)?;
    index_check(p, state.p(), "variable")?;
    let stats = ScoreStats::new(&data.x, &state.scores, state.j_star(), None);
    let erss = stats.expected_rss(&state.loadings)[p];
    Ok(state.hyper.b_psi + 0.5 * erss)
}

/// Optimal factor for the scores of observation `i`.
pub fn update_scores(state: &FaState, data: &Dataset, i: usize) -> Result<GaussianFactor> {
    check(state, data)?;
    index_check(i, state.n(), "observation")?;
    let cov = shared_score_cov(&state.loadings, &state.psi, state.j_star())?;
    let mean = score_means(&data.x.rows(i, 1).into_owned(), &state.loading_means(), &state.psi, &cov);
    Ok(GaussianFactor {
        mean: mean.row(0).transpose(),
        cov,
    })
}

/// Optimal local shrinkage factor for loading entry `(p, j)`.
pub fn update_local_shrinkage(state: &FaState, p: usize, j: usize) -> Result<GammaFactor> {
    index_check(p, state.p(), "variable")?;
    index_check(j, state.j_star(), "column")?;
    let g = &state.loadings[p];
    let m2 = g.mean[j] * g.mean[j] + g.cov[(j, j)];
    Ok(shrinkage::local_shrinkage_factor(
        &state.hyper.shrinkage(),
        cumulative_tau(&state.delta)[j],
        m2,
    ))
}

/// Optimal factor for the column multiplier at index `l`, holding the others fixed.
pub fn update_global_shrinkage(state: &FaState, l: usize) -> Result<GammaFactor> {
    index_check(l, state.j_star(), "column")?;
    let m2 = shrinkage::second_moments(&state.loadings);
    let sums = shrinkage::weighted_column_sums(&state.omega, &m2, state.j_star());
    Ok(shrinkage::global_shrinkage_factor(
        &state.hyper.shrinkage(),
        &state.delta,
        l,
        &sums,
        state.p(),
    ))
}

pub(crate) fn update_all_loadings(state: &mut FaState, stats: &ScoreStats) -> Result<()> {
    let taus = cumulative_tau(&state.delta);
    for p in 0..state.p() {
        let prior = prior_precision(&state.omega[p], &taus);
        state.loadings[p] =
            loading_natural(&prior, state.psi[p].mean(), 1.0, &stats.s2, stats.xtm.row(p).transpose()).to_moments()?;
    }
    Ok(())
}

pub(crate) fn update_all_psi(state: &mut FaState, stats: &ScoreStats, n: usize) {
    let erss = stats.expected_rss(&state.loadings);
    let h = state.hyper;
    for (p, e) in erss.into_iter().enumerate() {
        state.psi[p] = psi_factor(h.a_psi, h.b_psi, n, 1.0, e);
    }
}

/// Refreshes the score factors of `rows` (all observations when `None`).
pub(crate) fn update_score_rows(state: &mut FaState, x: &DMatrix<f64>, rows: Option<&[usize]>) -> Result<()> {
    let cov = shared_score_cov(&state.loadings, &state.psi, state.j_star())?;
    let loading_means = state.loading_means();
    match rows {
        None => {
            let means = score_means(x, &loading_means, &state.psi, &cov);
            for (i, g) in state.scores.iter_mut().enumerate() {
                g.mean = means.row(i).transpose();
                g.cov = cov.clone();
            }
        }
        Some(idx) => {
            let means = score_means(&x.select_rows(idx), &loading_means, &state.psi, &cov);
            for (r, &i) in idx.iter().enumerate() {
                state.scores[i].mean = means.row(r).transpose();
                state.scores[i].cov = cov.clone();
            }
        }
    }
    Ok(())
}

pub(crate) fn update_all_shrinkage(state: &mut FaState) {
    let prior = state.hyper.shrinkage();
    let m2 = shrinkage::second_moments(&state.loadings);
    shrinkage::update_omega(&prior, &mut state.omega, &state.delta, &m2);
    shrinkage::update_delta(&prior, &mut state.delta, &state.omega, &m2);
}

/// One full coordinate-ascent sweep.
pub fn cavi_sweep(state: &mut FaState, data: &Dataset) -> Result<()> {
    let stats = ScoreStats::new(&data.x, &state.scores, state.j_star(), None);
    update_all_loadings(state, &stats)?;
    update_all_psi(state, &stats, data.n());
    update_score_rows(state, &data.x, None)?;
    update_all_shrinkage(state);
    Ok(())
}

/// Evidence lower bound of the current state, in closed form.
pub fn elbo_fa(state: &FaState, data: &Dataset) -> Result<f64> {
    check(state, data)?;
    let n = data.n() as f64;
    let stats = ScoreStats::new(&data.x, &state.scores, state.j_star(), None);
    let mut total = 0.0;
    for (w, erss) in state.psi.iter().zip(stats.expected_rss(&state.loadings)) {
        total += 0.5 * n * (w.expected_log() - ln_2pi()) - 0.5 * w.mean() * erss;
        total += w.expected_log_prior(state.hyper.a_psi, state.hyper.b_psi) + w.entropy();
    }
    for g in &state.scores {
        total += g.expected_log_standard_normal() + g.entropy()?;
    }
    for g in &state.loadings {
        total += g.entropy()?;
    }
    let m2 = shrinkage::second_moments(&state.loadings);
    total += shrinkage::elbo_terms(&state.hyper.shrinkage(), &state.omega, &state.delta, &m2);
    if !total.is_finite() {
        return Err(VbError::Numerical("ELBO is not finite".into()));
    }
    Ok(total)
}

/// Initializes from the data and runs coordinate ascent to convergence.
pub fn fit_fa_cavi(data: &Dataset, hyper: &FaHyperParams, config: &FitConfig) -> Result<FitResult<FaState>> {
    config.validate()?;
    let start = Instant::now();
    let state = init_fa(data, hyper, config.init_sparsity)?;
    let mut result = fit_fa_cavi_from(state, data, config)?;
    result.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs coordinate ascent from a given state.
pub fn fit_fa_cavi_from(mut state: FaState, data: &Dataset, config: &FitConfig) -> Result<FitResult<FaState>> {
    config.validate()?;
    data.require_centered()?;
    check(&state, data)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut elbo_trace = config.track_elbo.then(Vec::new);
    let mut converged = false;
    for _ in 0..config.max_iter {
        let before = state.all_means();
        cavi_sweep(&mut state, data)?;
        let metric = linalg::mean_squared_difference(&before, &state.all_means());
        trace.push(metric);
        if let Some(e) = elbo_trace.as_mut() {
            e.push(elbo_fa(&state, data)?);
        }
        if !metric.is_finite() {
            return Err(VbError::Numerical("convergence metric is not finite".into()));
        }
        if metric <= config.tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        state,
        iterations: trace.len(),
        converged,
        trace,
        elbo_trace,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
