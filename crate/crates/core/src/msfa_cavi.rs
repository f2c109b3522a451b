//! Coordinate ascent for multi-study factor analysis.
//!
//! Observation `i` of study `s` is modelled as `x = Phi f + Lambda_s l + e`
//! with study-specific precisions. One sweep updates the study-specific
//! loadings, then the shared loadings, the precisions, the scores (the
//! study-specific block before the shared one) and finally the shrinkage
//! factors of every loading block.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VbError};
use crate::fa_cavi::{loading_natural, psi_factor, score_means, ScoreStats};
use crate::init::{init_msfa, shared_score_cov};
use crate::linalg;
use crate::model::{
    cumulative_tau, ln_2pi, prior_precision, rows_to_matrix, FitConfig, FitResult, GammaFactor, GaussianFactor,
    MsfaHyperParams, MsfaState, MultiStudyDataset, NaturalGaussian,
};
use crate::shrinkage;

/// Score moments of one study over a set of its observations.
pub(crate) struct StudyStats {
    pub f: ScoreStats,
    pub l: ScoreStats,
    /// `M_f^T M_l`, `K* x J*_s`.
    pub fl: DMatrix<f64>,
}

impl StudyStats {
    pub fn new(state: &MsfaState, x: &DMatrix<f64>, s: usize, rows: Option<&[usize]>) -> Self {
        let f = ScoreStats::new(x, &state.f_scores[s], state.k_star(), rows);
        let l = ScoreStats::new(x, &state.l_scores[s], state.j_star(s), rows);
        let fl = f.means.transpose() * &l.means;
        Self { f, l, fl }
    }

    /// `sum_i (x_ip - mu_phi_p^T mu_f_i) mu_l_i`.
    fn lambda_cross(&self, p: usize, phi_mean: &DVector<f64>) -> DVector<f64> {
        self.l.xtm.row(p).transpose() - self.fl.tr_mul(phi_mean)
    }

    /// `sum_i (x_ip - mu_lambda_p^T mu_l_i) mu_f_i`.
    fn phi_cross(&self, p: usize, lambda_mean: &DVector<f64>) -> DVector<f64> {
        self.f.xtm.row(p).transpose() - &self.fl * lambda_mean
    }

    /// Expected residual sum of squares of every variable.
    pub fn expected_rss(&self, phi: &[GaussianFactor], lambda: &[GaussianFactor]) -> Vec<f64> {
        let resid = &self.f.x
            - &self.f.means * rows_to_matrix(phi, self.f.s2.nrows()).transpose()
            - &self.l.means * rows_to_matrix(lambda, self.l.s2.nrows()).transpose();
        phi.iter()
            .zip(lambda)
            .enumerate()
            .map(|(p, (gf, gl))| {
                resid.column(p).norm_squared()
                    + (&self.f.s2 * &gf.cov).trace()
                    + gf.mean.dot(&(&self.f.cov_sum * &gf.mean))
                    + (&self.l.s2 * &gl.cov).trace()
                    + gl.mean.dot(&(&self.l.cov_sum * &gl.mean))
            })
            .collect()
    }
}

pub(crate) fn all_study_stats(state: &MsfaState, data: &MultiStudyDataset) -> Vec<StudyStats> {
    (0..state.num_studies())
        .map(|s| StudyStats::new(state, &data.studies[s].x, s, None))
        .collect()
}

/// Natural parameters of the optimal study-specific loading row `(s, p)`.
pub(crate) fn lambda_natural(state: &MsfaState, s: usize, p: usize, stats: &StudyStats, weight: f64) -> NaturalGaussian {
    let taus = cumulative_tau(&state.delta_specific[s]);
    let prior = prior_precision(&state.omega_specific[s][p], &taus);
    loading_natural(
        &prior,
        state.psi[s][p].mean(),
        weight,
        &stats.l.s2,
        stats.lambda_cross(p, &state.phi[p].mean),
    )
}

/// Natural parameters of the optimal shared loading row `p`, summing the
/// weighted contributions of every study.
pub(crate) fn phi_natural(state: &MsfaState, p: usize, stats: &[StudyStats], weights: &[f64]) -> NaturalGaussian {
    let k = state.k_star();
    let taus = cumulative_tau(&state.delta_shared);
    let mut eta1 = DMatrix::from_diagonal(&prior_precision(&state.omega_shared[p], &taus));
    let mut eta2 = DVector::zeros(k);
    for (s, (st, &w)) in stats.iter().zip(weights).enumerate() {
        let scale = state.psi[s][p].mean() * w;
        eta1 += &st.f.s2 * scale;
        eta2 += st.phi_cross(p, &state.lambda[s][p].mean) * scale;
    }
    NaturalGaussian {
        eta1: linalg::symmetrize(eta1),
        eta2,
    }
}

fn check(state: &MsfaState, data: &MultiStudyDataset) -> Result<()> {
    state.check_dims(data)
}

fn index_check(i: usize, len: usize, what: &str) -> Result<()> {
    if i >= len {
        return Err(VbError::Dimension(format!("{what} index {i} outside 0..{len}")));
    }
    Ok(())
}

/// Optimal factor for study-specific loading row `p` of study `s`.
pub fn update_lambda_row(state: &MsfaState, data: &MultiStudyDataset, s: usize, p: usize) -> Result<GaussianFactor> {
    check(state, data)?;
    index_check(s, state.num_studies(), "study")?;
    index_check(p, state.p(), "variable")?;
    let stats = StudyStats::new(state, &data.studies[s].x, s, None);
    lambda_natural(state, s, p, &stats, 1.0).to_moments()
}

/// Optimal factor for shared loading row `p`.
pub fn update_phi_row(state: &MsfaState, data: &MultiStudyDataset, p: usize) -> Result<GaussianFactor> {
    check(state, data)?;
    index_check(p, state.p(), "variable")?;
    let stats = all_study_stats(state, data);
    phi_natural(state, p, &stats, &vec![1.0; stats.len()]).to_moments()
}

/// Optimal rate of the precision of variable `p` in study `s`.
pub fn update_psi_rate_msfa(state: &MsfaState, data: &MultiStudyDataset, s: usize, p: usize) -> Result<f64> {
    check(state, data)?;
    index_check(s, state.num_studies(), "study")?;
    index_check(p, state.p(), "variable")?;
    let stats = StudyStats::new(state, &data.studies[s].x, s, None);
    Ok(state.hyper.b_psi + 0.5 * stats.expected_rss(&state.phi, &state.lambda[s])[p])
}

/// Optimal `(f, l)` score factors for observation `i` of study `s`, with `l`
/// updated first and `f` then using the new `l`.
pub fn update_scores_msfa(
    state: &MsfaState,
    data: &MultiStudyDataset,
    s: usize,
    i: usize,
) -> Result<(GaussianFactor, GaussianFactor)> {
    check(state, data)?;
    index_check(s, state.num_studies(), "study")?;
    index_check(i, state.n_s(s), "observation")?;
    let mut scratch = state.clone();
    update_study_scores(&mut scratch, s, &data.studies[s].x, Some(&[i]))?;
    Ok((scratch.f_scores[s][i].clone(), scratch.l_scores[s][i].clone()))
}

/// Refreshes the score factors of study `s` for `rows` (all observations when `None`).
pub(crate) fn update_study_scores(
    state: &mut MsfaState,
    s: usize,
    x: &DMatrix<f64>,
    rows: Option<&[usize]>,
) -> Result<()> {
    let k = state.k_star();
    let j = state.j_star(s);
    let xb = match rows {
        None => x.clone(),
        Some(idx) => x.select_rows(idx),
    };
    let pick = |scores: &[GaussianFactor], d: usize| match rows {
        None => rows_to_matrix(scores, d),
        Some(idx) => {
            let mut m = DMatrix::zeros(idx.len(), d);
            for (r, &i) in idx.iter().enumerate() {
                m.row_mut(r).copy_from(&scores[i].mean.transpose());
            }
            m
        }
    };
    let phi_means = state.phi_means();
    let lambda_means = state.lambda_means(s);

    let f_means = pick(&state.f_scores[s], k);
    let l_cov = shared_score_cov(&state.lambda[s], &state.psi[s], j)?;
    let l_means = score_means(&(&xb - &f_means * phi_means.transpose()), &lambda_means, &state.psi[s], &l_cov);
    assign(&mut state.l_scores[s], rows, &l_means, &l_cov);

    let f_cov = shared_score_cov(&state.phi, &state.psi[s], k)?;
    let f_means = score_means(&(&xb - &l_means * lambda_means.transpose()), &phi_means, &state.psi[s], &f_cov);
    assign(&mut state.f_scores[s], rows, &f_means, &f_cov);
    Ok(())
}

fn assign(scores: &mut [GaussianFactor], rows: Option<&[usize]>, means: &DMatrix<f64>, cov: &DMatrix<f64>) {
    let mut set = |r: usize, i: usize| {
        scores[i].mean = means.row(r).transpose();
        scores[i].cov = cov.clone();
    };
    match rows {
        None => (0..means.nrows()).for_each(|i| set(i, i)),
        Some(idx) => idx.iter().enumerate().for_each(|(r, &i)| set(r, i)),
    }
}

pub fn update_shared_shrinkage(state: &MsfaState, p: usize, k: usize) -> Result<GammaFactor> {
    index_check(p, state.p(), "variable")?;
    index_check(k, state.k_star(), "shared column")?;
    let g = &state.phi[p];
    Ok(shrinkage::local_shrinkage_factor(
        &state.hyper.shared,
        cumulative_tau(&state.delta_shared)[k],
        g.mean[k] * g.mean[k] + g.cov[(k, k)],
    ))
}

pub fn update_specific_shrinkage(state: &MsfaState, s: usize, p: usize, j: usize) -> Result<GammaFactor> {
    index_check(s, state.num_studies(), "study")?;
    index_check(p, state.p(), "variable")?;
    index_check(j, state.j_star(s), "study-specific column")?;
    let g = &state.lambda[s][p];
    Ok(shrinkage::local_shrinkage_factor(
        &state.hyper.per_study[s],
        cumulative_tau(&state.delta_specific[s])[j],
        g.mean[j] * g.mean[j] + g.cov[(j, j)],
    ))
}

pub fn update_shared_delta(state: &MsfaState, l: usize) -> Result<GammaFactor> {
    index_check(l, state.k_star(), "shared column")?;
    let m2 = shrinkage::second_moments(&state.phi);
    let sums = shrinkage::weighted_column_sums(&state.omega_shared, &m2, state.k_star());
    Ok(shrinkage::global_shrinkage_factor(
        &state.hyper.shared,
        &state.delta_shared,
        l,
        &sums,
        state.p(),
    ))
}

pub fn update_specific_delta(state: &MsfaState, s: usize, l: usize) -> Result<GammaFactor> {
    index_check(s, state.num_studies(), "study")?;
    index_check(l, state.j_star(s), "study-specific column")?;
    let m2 = shrinkage::second_moments(&state.lambda[s]);
    let sums = shrinkage::weighted_column_sums(&state.omega_specific[s], &m2, state.j_star(s));
    Ok(shrinkage::global_shrinkage_factor(
        &state.hyper.per_study[s],
        &state.delta_specific[s],
        l,
        &sums,
        state.p(),
    ))
}

/// Local multipliers of every block, then column multipliers of every block.
pub(crate) fn update_all_shrinkage_msfa(state: &mut MsfaState) {
    let shared_m2 = shrinkage::second_moments(&state.phi);
    let specific_m2: Vec<_> = state.lambda.iter().map(|rows| shrinkage::second_moments(rows)).collect();
    shrinkage::update_omega(&state.hyper.shared, &mut state.omega_shared, &state.delta_shared, &shared_m2);
    for s in 0..state.num_studies() {
        shrinkage::update_omega(
            &state.hyper.per_study[s],
            &mut state.omega_specific[s],
            &state.delta_specific[s],
            &specific_m2[s],
        );
    }
    shrinkage::update_delta(&state.hyper.shared, &mut state.delta_shared, &state.omega_shared, &shared_m2);
    for s in 0..state.num_studies() {
        shrinkage::update_delta(
            &state.hyper.per_study[s],
            &mut state.delta_specific[s],
            &state.omega_specific[s],
            &specific_m2[s],
        );
    }
}

pub(crate) fn psi_rates_from(state: &MsfaState, stats: &StudyStats, s: usize, weight: f64, n: usize) -> Vec<GammaFactor> {
    let h = &state.hyper;
    stats
        .expected_rss(&state.phi, &state.lambda[s])
        .into_iter()
        .map(|e| psi_factor(h.a_psi, h.b_psi, n, weight, e))
        .collect()
}

/// One full coordinate-ascent sweep.
pub fn cavi_sweep_msfa(state: &mut MsfaState, data: &MultiStudyDataset) -> Result<()> {
    let stats = all_study_stats(state, data);
    for (s, st) in stats.iter().enumerate() {
        for p in 0..state.p() {
            state.lambda[s][p] = lambda_natural(state, s, p, st, 1.0).to_moments()?;
        }
    }
    let ones = vec![1.0; stats.len()];
    for p in 0..state.p() {
        state.phi[p] = phi_natural(state, p, &stats, &ones).to_moments()?;
    }
    for (s, st) in stats.iter().enumerate() {
        state.psi[s] = psi_rates_from(state, st, s, 1.0, data.studies[s].n());
    }
    for s in 0..state.num_studies() {
        update_study_scores(state, s, &data.studies[s].x, None)?;
    }
    update_all_shrinkage_msfa(state);
    Ok(())
}

/// Evidence lower bound of the current state, in closed form.
pub fn elbo_msfa(state: &MsfaState, data: &MultiStudyDataset) -> Result<f64> {
    check(state, data)?;
    let h = &state.hyper;
    let mut total = 0.0;
    for (s, st) in all_study_stats(state, data).iter().enumerate() {
        let n = data.studies[s].n() as f64;
        for (w, erss) in state.psi[s].iter().zip(st.expected_rss(&state.phi, &state.lambda[s])) {
            total += 0.5 * n * (w.expected_log() - ln_2pi()) - 0.5 * w.mean() * erss;
            total += w.expected_log_prior(h.a_psi, h.b_psi) + w.entropy();
        }
        for g in state.f_scores[s].iter().chain(&state.l_scores[s]) {
            total += g.expected_log_standard_normal() + g.entropy()?;
        }
        for g in &state.lambda[s] {
            total += g.entropy()?;
        }
        let m2 = shrinkage::second_moments(&state.lambda[s]);
        total += shrinkage::elbo_terms(&h.per_study[s], &state.omega_specific[s], &state.delta_specific[s], &m2);
    }
    for g in &state.phi {
        total += g.entropy()?;
    }
    let m2 = shrinkage::second_moments(&state.phi);
    total += shrinkage::elbo_terms(&h.shared, &state.omega_shared, &state.delta_shared, &m2);
    if !total.is_finite() {
        return Err(VbError::Numerical("ELBO is not finite".into()));
    }
    Ok(total)
}

/// Initializes from the data and runs coordinate ascent to convergence.
pub fn fit_msfa_cavi(
    data: &MultiStudyDataset,
    hyper: &MsfaHyperParams,
    config: &FitConfig,
) -> Result<FitResult<MsfaState>> {
    config.validate()?;
    let start = Instant::now();
    let state = init_msfa(data, hyper, config.init_sparsity)?;
    let mut result = fit_msfa_cavi_from(state, data, config)?;
    result.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

pub fn fit_msfa_cavi_from(
    mut state: MsfaState,
    data: &MultiStudyDataset,
    config: &FitConfig,
) -> Result<FitResult<MsfaState>> {
    config.validate()?;
    for d in &data.studies {
        d.require_centered()?;
    }
    check(&state, data)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut elbo_trace = config.track_elbo.then(Vec::new);
    let mut converged = false;
    for _ in 0..config.max_iter {
        let before = state.all_means();
        cavi_sweep_msfa(&mut state, data)?;
        let metric = linalg::mean_squared_difference(&before, &state.all_means());
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
    Ok(FitResult {
        state,
        iterations: trace.len(),
        converged,
        trace,
        elbo_trace,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fa_cavi::{cavi_sweep, elbo_fa, update_loadings_row};
    use crate::init::init_fa;
    use crate::model::{Dataset, FaHyperParams, FaState};
    use crate::simulate::{generate_msfa_truth, sample_msfa_dataset};

    fn centered(data: MultiStudyDataset) -> MultiStudyDataset {
        MultiStudyDataset::new(
            data.studies
                .into_iter()
                .map(|d| Dataset::centered(d.x).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn problem(seed: u64) -> (MultiStudyDataset, MsfaState) {
        let t = generate_msfa_truth(3, 8, 2, &[1, 2, 1], seed).unwrap();
        let d = centered(sample_msfa_dataset(&t, &[30, 25, 40], seed).unwrap());
        let s = init_msfa(&d, &MsfaHyperParams::with_truncations(3, &[2, 3, 2]), 0.0).unwrap();
        (d, s)
    }

    /// The single-study state viewed as a multi-study state without shared factors.
    fn lift(fa: &FaState) -> MsfaState {
        let h = fa.hyper;
        let mut hyper = MsfaHyperParams::with_truncations(0, &[h.j_star]);
        hyper.per_study[0] = h.shrinkage();
        hyper.a_psi = h.a_psi;
        hyper.b_psi = h.b_psi;
        let empty = |n: usize| vec![GaussianFactor::standard(0); n];
        MsfaState {
            hyper,
            phi: empty(fa.p()),
            lambda: vec![fa.loadings.clone()],
            f_scores: vec![empty(fa.n())],
            l_scores: vec![fa.scores.clone()],
            psi: vec![fa.psi.clone()],
            omega_shared: vec![vec![]; fa.p()],
            delta_shared: vec![],
            omega_specific: vec![fa.omega.clone()],
            delta_specific: vec![fa.delta.clone()],
        }
    }

    fn single_study() -> (Dataset, FaState) {
        let t = generate_msfa_truth(1, 6, 1, &[1], 4).unwrap();
        let d = Dataset::centered(sample_msfa_dataset(&t, &[40], 4).unwrap().studies[0].x.clone()).unwrap();
        let s = init_fa(&d, &FaHyperParams::with_truncation(3), 0.0).unwrap();
        (d, s)
    }

    #[test]
    fn lambda_hand_case() {
        let mut data = MultiStudyDataset::new(vec![Dataset::centered(DMatrix::zeros(1, 1)).unwrap()]).unwrap();
        let mut s = init_msfa(&data, &MsfaHyperParams::with_truncations(1, &[1]), 0.0).unwrap();
        data.studies[0].x[(0, 0)] = 2.0;
        s.phi[0] = GaussianFactor::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
        s.l_scores[0][0] = GaussianFactor {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::zeros(1, 1),
        };
        s.psi[0][0] = GammaFactor::new(2.0, 2.0).unwrap();
        s.omega_specific[0][0][0] = GammaFactor::new(1.0, 1.0).unwrap();
        s.delta_specific[0][0] = GammaFactor::new(1.0, 1.0).unwrap();
        let g = update_lambda_row(&s, &data, 0, 0).unwrap();
        assert!((g.cov[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((g.mean[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reduces_to_single_study_updates() {
        let (d, fa) = single_study();
        let ms = lift(&fa);
        let data = MultiStudyDataset::new(vec![d.clone()]).unwrap();
        for p in 0..fa.p() {
            let a = update_lambda_row(&ms, &data, 0, p).unwrap();
            let b = update_loadings_row(&fa, &d, p).unwrap();
            assert!((a.mean - b.mean).amax() < 1e-12 && (a.cov - b.cov).amax() < 1e-12);
        }
        assert!((elbo_msfa(&ms, &data).unwrap() - elbo_fa(&fa, &d).unwrap()).abs() < 1e-9);

        // the same data on the shared side with the study-specific block empty
        let mut shared = ms.clone();
        shared.hyper = MsfaHyperParams::with_truncations(3, &[0]);
        shared.hyper.shared = fa.hyper.shrinkage();
        std::mem::swap(&mut shared.phi, &mut shared.lambda[0]);
        std::mem::swap(&mut shared.f_scores[0], &mut shared.l_scores[0]);
        std::mem::swap(&mut shared.omega_shared, &mut shared.omega_specific[0]);
        std::mem::swap(&mut shared.delta_shared, &mut shared.delta_specific[0]);
        for p in 0..fa.p() {
            let a = update_phi_row(&shared, &data, p).unwrap();
            let b = update_loadings_row(&fa, &d, p).unwrap();
            assert!((a.mean - b.mean).amax() < 1e-12 && (a.cov - b.cov).amax() < 1e-12);
        }
    }

    #[test]
    fn sweeps_reproduce_single_study_iterates() {
        let (d, mut fa) = single_study();
        let mut ms = lift(&fa);
        let data = MultiStudyDataset::new(vec![d.clone()]).unwrap();
        for _ in 0..15 {
            cavi_sweep(&mut fa, &d).unwrap();
            cavi_sweep_msfa(&mut ms, &data).unwrap();
        }
        for p in 0..fa.p() {
            assert!((&ms.lambda[0][p].mean - &fa.loadings[p].mean).amax() < 1e-10);
            assert!((ms.psi[0][p].beta - fa.psi[p].beta).abs() < 1e-10);
        }
        for i in 0..fa.n() {
            assert!((&ms.l_scores[0][i].mean - &fa.scores[i].mean).amax() < 1e-10);
        }
    }

    #[test]
    fn duplicated_study_doubles_shared_precision() {
        let (d, _) = single_study();
        let d1 = MultiStudyDataset::new(vec![d.clone()]).unwrap();
        let d2 = MultiStudyDataset::new(vec![d.clone(), d]).unwrap();
        let one = init_msfa(&d1, &MsfaHyperParams::with_truncations(3, &[1]), 0.0).unwrap();
        let mut two = one.clone();
        two.hyper.per_study.push(two.hyper.per_study[0]);
        for v in [&mut two.lambda, &mut two.f_scores, &mut two.l_scores] {
            v.push(v[0].clone());
        }
        two.omega_specific.push(two.omega_specific[0].clone());
        two.psi.push(two.psi[0].clone());
        two.delta_specific.push(two.delta_specific[0].clone());
        let taus = cumulative_tau(&one.delta_shared);
        for p in 0..one.p() {
            let prior = DMatrix::from_diagonal(&prior_precision(&one.omega_shared[p], &taus));
            let a = update_phi_row(&one, &d1, p).unwrap();
            let b = update_phi_row(&two, &d2, p).unwrap();
            let la = linalg::spd_inverse(&a.cov).unwrap() - &prior;
            let lb = linalg::spd_inverse(&b.cov).unwrap() - &prior;
            assert!((lb - la * 2.0).amax() < 1e-8 * (1.0 + prior.amax()));
        }
    }

    #[test]
    fn psi_rate_reductions() {
        let (d, mut s) = problem(1);
        for g in s.phi.iter_mut().chain(s.lambda.iter_mut().flatten()) {
            g.cov.fill(0.0);
        }
        for g in s.f_scores.iter_mut().chain(s.l_scores.iter_mut()).flatten() {
            g.cov.fill(0.0);
        }
        let x = &d.studies[1].x;
        let fitted = s.f_means(1) * s.phi_means().transpose() + s.l_means(1) * s.lambda_means(1).transpose();
        for p in 0..s.p() {
            let rss = (x.column(p) - fitted.column(p)).norm_squared();
            let got = update_psi_rate_msfa(&s, &d, 1, p).unwrap();
            assert!((got - (s.hyper.b_psi + 0.5 * rss)).abs() < 1e-10);
        }
    }

    #[test]
    fn scores_reset_without_loadings() {
        let (d, mut s) = problem(2);
        for g in s.phi.iter_mut().chain(s.lambda.iter_mut().flatten()) {
            g.mean.fill(0.0);
            g.cov.fill(0.0);
        }
        let (f, l) = update_scores_msfa(&s, &d, 0, 3).unwrap();
        assert!(f.mean.amax() == 0.0 && (f.cov - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!(l.mean.amax() == 0.0 && (l.cov - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn other_studies_do_not_affect_specific_update() {
        let (d, s) = problem(3);
        let mut shifted = d.clone();
        shifted.studies[2].x.add_scalar_mut(5.0);
        let a = update_lambda_row(&s, &d, 0, 4).unwrap();
        let b = update_lambda_row(&s, &shifted, 0, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elbo_is_monotone_and_label_invariant() {
        for seed in 0..20 {
            let (d, mut s) = problem(seed);
            let mut last = elbo_msfa(&s, &d).unwrap();
            for _ in 0..10 {
                cavi_sweep_msfa(&mut s, &d).unwrap();
                let e = elbo_msfa(&s, &d).unwrap();
                assert!(e >= last - 1e-8 * last.abs(), "seed {seed}: {last} -> {e}");
                last = e;
            }
            let mut perm = s.clone();
            let mut pd = d.clone();
            pd.studies.swap(0, 2);
            perm.hyper.per_study.swap(0, 2);
            for v in [&mut perm.lambda, &mut perm.f_scores, &mut perm.l_scores] {
                v.swap(0, 2);
            }
            perm.psi.swap(0, 2);
            perm.omega_specific.swap(0, 2);
            perm.delta_specific.swap(0, 2);
            assert!((elbo_msfa(&perm, &pd).unwrap() - last).abs() < 1e-9 * last.abs());
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let (d, _) = problem(5);
        let hyper = MsfaHyperParams::with_truncations(3, &[2, 3, 2]);
        let a = fit_msfa_cavi(&d, &hyper, &FitConfig::cavi()).unwrap();
        let b = fit_msfa_cavi(&d, &hyper, &FitConfig::cavi()).unwrap();
        assert_eq!(a.state, b.state);
        assert!(a.converged);
        a.state.validate().unwrap();
    }
}
