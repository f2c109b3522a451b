//! Updates and ELBO terms for a loading block under the multiplicative
//! gamma process prior. Shared by the single- and multi-study models.

use crate::model::{cumulative_log_tau, cumulative_tau, ln_2pi, GammaFactor, GaussianFactor, ShrinkagePrior};

/// `E[lambda_pj^2] = mu_pj^2 + Sigma_pjj` for every loading row.
pub(crate) fn second_moments(rows: &[GaussianFactor]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|g| (0..g.dim()).map(|j| g.mean[j] * g.mean[j] + g.cov[(j, j)]).collect())
        .collect()
}

/// Optimal local shrinkage factor for one loading entry.
pub fn local_shrinkage_factor(prior: &ShrinkagePrior, tau_j: f64, second_moment: f64) -> GammaFactor {
    GammaFactor {
        alpha: prior.omega_shape(),
        beta: 0.5 * (prior.nu + tau_j * second_moment),
    }
}

pub(crate) fn update_omega(
    prior: &ShrinkagePrior,
    omega: &mut [Vec<GammaFactor>],
    delta: &[GammaFactor],
    m2: &[Vec<f64>],
) {
    let taus = cumulative_tau(delta);
    for (row, m2_row) in omega.iter_mut().zip(m2) {
        for (j, w) in row.iter_mut().enumerate() {
            *w = local_shrinkage_factor(prior, taus[j], m2_row[j]);
        }
    }
}

/// `sum_p E[omega_pj] E[lambda_pj^2]` for every column.
pub(crate) fn weighted_column_sums(omega: &[Vec<GammaFactor>], m2: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut sums = vec![0.0; d];
    for (row, m2_row) in omega.iter().zip(m2) {
        for j in 0..d {
            sums[j] += row[j].mean() * m2_row[j];
        }
    }
    sums
}

/// Optimal factor for the column multiplier at 0-based index `l`, given the
/// current multipliers and the weighted column sums.
pub fn global_shrinkage_factor(
    prior: &ShrinkagePrior,
    delta: &[GammaFactor],
    l: usize,
    column_sums: &[f64],
    p: usize,
) -> GammaFactor {
    let mut rate = 1.0;
    let mut leave_one_out: f64 = delta[..l].iter().map(GammaFactor::mean).product();
    for j in l..delta.len() {
        if j > l {
            leave_one_out *= delta[j].mean();
        }
        rate += 0.5 * leave_one_out * column_sums[j];
    }
    GammaFactor {
        alpha: prior.delta_shape(l, p),
        beta: rate,
    }
}

/// Updates every column multiplier in order, each using the newest values of the others.
pub(crate) fn update_delta(
    prior: &ShrinkagePrior,
    delta: &mut [GammaFactor],
    omega: &[Vec<GammaFactor>],
    m2: &[Vec<f64>],
) {
    let d = delta.len();
    let p = omega.len();
    let sums = weighted_column_sums(omega, m2, d);
    for l in 0..d {
        delta[l] = global_shrinkage_factor(prior, delta, l, &sums, p);
    }
}

/// Prior factors for a block of `p` rows, with the fixed optimal shapes and
/// rates chosen so each mean equals the prior mean.
pub(crate) fn prior_factors(prior: &ShrinkagePrior, p: usize) -> (Vec<Vec<GammaFactor>>, Vec<GammaFactor>) {
    let a = prior.omega_shape();
    let omega = vec![vec![GammaFactor { alpha: a, beta: a }; prior.truncation]; p];
    let delta = (0..prior.truncation)
        .map(|l| {
            let alpha = prior.delta_shape(l, p);
            GammaFactor {
                alpha,
                beta: alpha / prior.delta_prior_shape(l),
            }
        })
        .collect();
    (omega, delta)
}

/// `E[log p(loadings | omega, delta)] + E[log p(omega)] + E[log p(delta)]`
/// plus the entropies of the omega and delta factors.
pub(crate) fn elbo_terms(
    prior: &ShrinkagePrior,
    omega: &[Vec<GammaFactor>],
    delta: &[GammaFactor],
    m2: &[Vec<f64>],
) -> f64 {
    let taus = cumulative_tau(delta);
    let log_taus = cumulative_log_tau(delta);
    let half_nu = 0.5 * prior.nu;
    let mut total = 0.0;
    for (row, m2_row) in omega.iter().zip(m2) {
        for (j, w) in row.iter().enumerate() {
            let e_log_w = w.expected_log();
            total += -0.5 * ln_2pi() + 0.5 * (e_log_w + log_taus[j]) - 0.5 * w.mean() * taus[j] * m2_row[j];
            total += w.expected_log_prior(half_nu, half_nu) + w.entropy();
        }
    }
    for (l, d) in delta.iter().enumerate() {
        total += d.expected_log_prior(prior.delta_prior_shape(l), 1.0) + d.entropy();
    }
    total
}
