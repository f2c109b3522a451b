//! Stochastic variational inference for single-study factor analysis.
//!
//! Each step refreshes the scores of a random minibatch, forms noisy natural
//! parameters for the loading rows and precision rates with the minibatch
//! sums scaled by `N / batch size`, and blends them into the current values
//! with step size `rho_t = (t + delay)^-kappa`. The shrinkage factors then
//! get their usual coordinate-ascent updates.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use crate::error::{Result, VbError};
use crate::fa_cavi::{loading_natural, psi_factor, update_all_shrinkage, update_score_rows, ScoreStats};
use crate::init::init_fa;
use crate::linalg;
use crate::model::{
    batch_size, cumulative_tau, prior_precision, Dataset, FaHyperParams, FaState, FitConfig, FitResult,
    GaussianFactor, NaturalGaussian, SviConfig,
};
use crate::rng;

/// `rho_t = (t + delay)^-kappa` for `t >= 1`.
pub fn step_size(t: usize, cfg: &SviConfig) -> f64 {
    (t as f64 + cfg.delay).powf(-cfg.kappa)
}

/// `floor(fraction * n)` distinct indices drawn uniformly without replacement, sorted.
pub fn sample_minibatch<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    let size = batch_size(n, fraction);
    if size == 0 || size > n {
        return Err(VbError::Config(format!(
            "batch fraction {fraction} on {n} observations gives a batch of {size}"
        )));
    }
    let mut idx = index::sample(rng, n, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn to_natural(g: &GaussianFactor) -> Result<NaturalGaussian> {
    NaturalGaussian::from_moments(g)
}

pub fn from_natural(n: &NaturalGaussian) -> Result<GaussianFactor> {
    n.to_moments()
}

/// The minibatch used at iteration `t` for study `s`.
pub(crate) fn batch_for(seed: u64, s: usize, t: usize, n: usize, fraction: f64) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, &[rng::MINIBATCH, s as u64, t as u64]);
    sample_minibatch(n, fraction, &mut r)
}

/// One stochastic step on a given minibatch with a given step size.
pub fn svi_step_fa_with(state: &FaState, data: &Dataset, batch: &[usize], rho: f64) -> Result<FaState> {
    let mut next = state.clone();
    let mut naturals = loading_naturals(&next)?;
    step_in_place(&mut next, &mut naturals, data, batch, rho)?;
    Ok(next)
}

fn loading_naturals(state: &FaState) -> Result<Vec<NaturalGaussian>> {
    state.loadings.iter().map(to_natural).collect()
}

/// Updates `state` in place; `naturals` holds the natural parameters of the
/// loading rows and is kept in step with them.
fn step_in_place(
    state: &mut FaState,
    naturals: &mut [NaturalGaussian],
    data: &Dataset,
    batch: &[usize],
    rho: f64,
) -> Result<()> {
    state.check_dims(data)?;
    if batch.is_empty() || batch.iter().any(|&i| i >= data.n()) {
        return Err(VbError::Config("minibatch is empty or out of range".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(VbError::Config(format!("step size must lie in [0, 1], got {rho}")));
    }
    let weight = data.n() as f64 / batch.len() as f64;
    update_score_rows(state, &data.x, Some(batch))?;
    let stats = ScoreStats::new(&data.x, &state.scores, state.j_star(), Some(batch));

    if rho > 0.0 {
        let taus = cumulative_tau(&state.delta);
        for p in 0..state.p() {
            let prior = prior_precision(&state.omega[p], &taus);
            let noisy =
                loading_natural(&prior, state.psi[p].mean(), weight, &stats.s2, stats.xtm.row(p).transpose());
            naturals[p] = if rho == 1.0 { noisy } else { naturals[p].blend(&noisy, rho) };
            state.loadings[p] = naturals[p].to_moments()?;
        }
    }

    let erss = stats.expected_rss(&state.loadings);
    let h = state.hyper;
    for (p, e) in erss.into_iter().enumerate() {
        let noisy = psi_factor(h.a_psi, h.b_psi, data.n(), weight, e);
        state.psi[p].beta = (1.0 - rho) * state.psi[p].beta + rho * noisy.beta;
        state.psi[p].alpha = noisy.alpha;
        state.psi[p].validate()?;
    }

    update_all_shrinkage(state);
    Ok(())
}

/// One stochastic step at iteration `t`, with the minibatch derived from `(seed, t)`.
pub fn svi_step_fa(state: &FaState, data: &Dataset, t: usize, cfg: &SviConfig, seed: u64) -> Result<FaState> {
    if t == 0 {
        return Err(VbError::Config("iterations are counted from 1".into()));
    }
    cfg.validate(&[data.n()])?;
    let batch = batch_for(seed, 0, t, data.n(), cfg.fraction_for(0))?;
    svi_step_fa_with(state, data, &batch, step_size(t, cfg))
}

/// Initializes from the data and runs stochastic steps to convergence, then
/// refreshes every score factor once.
pub fn fit_fa_svi(data: &Dataset, hyper: &FaHyperParams, config: &FitConfig) -> Result<FitResult<FaState>> {
    config.validate()?;
    let start = Instant::now();
    let state = init_fa(data, hyper, config.init_sparsity)?;
    let mut result = fit_fa_svi_from(state, data, config)?;
    result.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

pub fn fit_fa_svi_from(mut state: FaState, data: &Dataset, config: &FitConfig) -> Result<FitResult<FaState>> {
    config.validate()?;
    let svi = config.require_svi()?;
    svi.validate(&[data.n()])?;
    data.require_centered()?;
    state.check_dims(data)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut elbo_trace = config.track_elbo.then(Vec::new);
    let mut converged = false;
    let mut naturals = loading_naturals(&state)?;
    for t in 1..=config.max_iter {
        let before = state.global_means();
        let batch = batch_for(config.seed, 0, t, data.n(), svi.fraction_for(0))?;
        step_in_place(&mut state, &mut naturals, data, &batch, step_size(t, svi))?;
        let metric = linalg::mean_squared_difference(&before, &state.global_means());
        trace.push(metric);
        if let Some(e) = elbo_trace.as_mut() {
            e.push(crate::fa_cavi::elbo_fa(&state, data)?);
        }
        if !metric.is_finite() {
            return Err(VbError::Numerical("convergence metric is not finite".into()));
        }
        if metric <= config.tol {
            converged = true;
            break;
        }
    }
    update_score_rows(&mut state, &data.x, None)?;
    Ok(FitResult {
        state,
        iterations: trace.len(),
        converged,
        trace,
        elbo_trace,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
