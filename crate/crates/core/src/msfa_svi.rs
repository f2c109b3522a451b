//! Stochastic variational inference for multi-study factor analysis.
//!
//! Every study draws its own minibatch from an independent stream. The noisy
//! study-specific loadings and precisions use the weight `N_s / batch size`
//! of their study; the noisy shared loadings add up the weighted
//! contributions of all studies before a single blend.

use std::time::Instant;

use crate::error::{Result, VbError};
use crate::fa_svi::{batch_for, step_size, to_natural};
use crate::init::init_msfa;
use crate::linalg;
use crate::model::{FitConfig, FitResult, MsfaHyperParams, MsfaState, MultiStudyDataset, NaturalGaussian, SviConfig};
use crate::msfa_cavi::{
    elbo_msfa, lambda_natural, phi_natural, psi_rates_from, update_all_shrinkage_msfa, update_study_scores,
    StudyStats,
};

/// Natural parameters of every loading row: shared rows, then each study's rows.
struct Naturals {
    phi: Vec<NaturalGaussian>,
    lambda: Vec<Vec<NaturalGaussian>>,
}

impl Naturals {
    fn of(state: &MsfaState) -> Result<Self> {
        Ok(Self {
            phi: state.phi.iter().map(to_natural).collect::<Result<_>>()?,
            lambda: state
                .lambda
                .iter()
                .map(|rows| rows.iter().map(to_natural).collect::<Result<_>>())
                .collect::<Result<_>>()?,
        })
    }
}

fn blend_into(current: &mut NaturalGaussian, noisy: NaturalGaussian, rho: f64) {
    *current = if rho == 1.0 { noisy } else { current.blend(&noisy, rho) };
}

/// One stochastic step with explicit per-study minibatches and step size.
pub fn svi_step_msfa_with(
    state: &MsfaState,
    data: &MultiStudyDataset,
    batches: &[Vec<usize>],
    rho: f64,
) -> Result<MsfaState> {
    let mut next = state.clone();
    let mut naturals = Naturals::of(&next)?;
    step_in_place(&mut next, &mut naturals, data, batches, rho)?;
    Ok(next)
}

fn step_in_place(
    state: &mut MsfaState,
    naturals: &mut Naturals,
    data: &MultiStudyDataset,
    batches: &[Vec<usize>],
    rho: f64,
) -> Result<()> {
    state.check_dims(data)?;
    if batches.len() != state.num_studies() {
        return Err(VbError::Config(format!(
            "{} minibatches for {} studies",
            batches.len(),
            state.num_studies()
        )));
    }
    for (s, b) in batches.iter().enumerate() {
        if b.is_empty() || b.iter().any(|&i| i >= data.studies[s].n()) {
            return Err(VbError::Config(format!("minibatch of study {s} is empty or out of range")));
        }
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(VbError::Config(format!("step size must lie in [0, 1], got {rho}")));
    }
    let weights: Vec<f64> = batches
        .iter()
        .enumerate()
        .map(|(s, b)| data.studies[s].n() as f64 / b.len() as f64)
        .collect();

    for (s, b) in batches.iter().enumerate() {
        update_study_scores(state, s, &data.studies[s].x, Some(b))?;
    }
    let stats: Vec<StudyStats> = batches
        .iter()
        .enumerate()
        .map(|(s, b)| StudyStats::new(state, &data.studies[s].x, s, Some(b)))
        .collect();

    if rho > 0.0 {
        for (s, st) in stats.iter().enumerate() {
            for p in 0..state.p() {
                let noisy = lambda_natural(state, s, p, st, weights[s]);
                blend_into(&mut naturals.lambda[s][p], noisy, rho);
                state.lambda[s][p] = naturals.lambda[s][p].to_moments()?;
            }
        }
        for p in 0..state.p() {
            let noisy = phi_natural(state, p, &stats, &weights);
            blend_into(&mut naturals.phi[p], noisy, rho);
            state.phi[p] = naturals.phi[p].to_moments()?;
        }
    }

    for (s, st) in stats.iter().enumerate() {
        let noisy = psi_rates_from(state, st, s, weights[s], data.studies[s].n());
        for (w, target) in state.psi[s].iter_mut().zip(noisy) {
            w.beta = (1.0 - rho) * w.beta + rho * target.beta;
            w.alpha = target.alpha;
            w.validate()?;
        }
    }

    update_all_shrinkage_msfa(state);
    Ok(())
}

fn batches_for(data: &MultiStudyDataset, t: usize, cfg: &SviConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    data.studies
        .iter()
        .enumerate()
        .map(|(s, d)| batch_for(seed, s, t, d.n(), cfg.fraction_for(s)))
        .collect()
}

fn study_sizes(data: &MultiStudyDataset) -> Vec<usize> {
    data.studies.iter().map(|d| d.n()).collect()
}

/// One stochastic step at iteration `t`; study `s` draws its minibatch from
/// the stream keyed by `(seed, s, t)`.
pub fn svi_step_msfa(
    state: &MsfaState,
    data: &MultiStudyDataset,
    t: usize,
    cfg: &SviConfig,
    seed: u64,
) -> Result<MsfaState> {
    if t == 0 {
        return Err(VbError::Config("iterations are counted from 1".into()));
    }
    cfg.validate(&study_sizes(data))?;
    let batches = batches_for(data, t, cfg, seed)?;
    svi_step_msfa_with(state, data, &batches, step_size(t, cfg))
}

pub fn fit_msfa_svi(
    data: &MultiStudyDataset,
    hyper: &MsfaHyperParams,
    config: &FitConfig,
) -> Result<FitResult<MsfaState>> {
    config.validate()?;
    let start = Instant::now();
    let state = init_msfa(data, hyper, config.init_sparsity)?;
    let mut result = fit_msfa_svi_from(state, data, config)?;
    result.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs stochastic steps from a given state to convergence, then refreshes
/// every score factor once.
pub fn fit_msfa_svi_from(
    mut state: MsfaState,
    data: &MultiStudyDataset,
    config: &FitConfig,
) -> Result<FitResult<MsfaState>> {
    config.validate()?;
    let svi = config.require_svi()?;
    svi.validate(&study_sizes(data))?;
    for d in &data.studies {
        d.require_centered()?;
    }
    state.check_dims(data)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut elbo_trace = config.track_elbo.then(Vec::new);
    let mut converged = false;
    let mut naturals = Naturals::of(&state)?;
    for t in 1..=config.max_iter {
        let before = state.global_means();
        let batches = batches_for(data, t, svi, config.seed)?;
        step_in_place(&mut state, &mut naturals, data, &batches, step_size(t, svi))?;
        let metric = linalg::mean_squared_difference(&before, &state.global_means());
        trace.push(metric);
        if let Some(e) = elbo_trace.as_mut() {
            e.push(elbo_msfa(&state, data)?);
        }
        if !metric.is_finite() {
            return Err(VbError::Numerical("convergence metric is not finite".into()));
        }
        if metric <= config.tol {
            converged = true;
            break;
        }
    }
    for s in 0..state.num_studies() {
        update_study_scores(&mut state, s, &data.studies[s].x, None)?;
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
