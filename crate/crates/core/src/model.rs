//! Domain types shared by every algorithm: hyperparameters, variational
//! factors, model states, datasets and fit configuration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Result, VbError};
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multiplicative gamma process prior for one loading family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkagePrior {
    /// Local shrinkage gamma shape and rate `nu / 2`.
    pub nu: f64,
    /// Shape of the first column multiplier.
    pub a1: f64,
    /// Shape of every later column multiplier.
    pub a2: f64,
    /// Number of columns kept after truncation.
    pub truncation: usize,
}

impl ShrinkagePrior {
    pub fn new(nu: f64, a1: f64, a2: f64, truncation: usize) -> Self {
        Self { nu, a1, a2, truncation }
    }

    /// Prior shape of the column multiplier at 0-based index `l`.
    pub fn delta_prior_shape(&self, l: usize) -> f64 {
        if l == 0 {
            self.a1
        } else {
            self.a2
        }
    }

    /// Fixed variational shape of the column multiplier at 0-based index `l`
    /// for `p` variables.
    pub fn delta_shape(&self, l: usize, p: usize) -> f64 {
        self.delta_prior_shape(l) + 0.5 * p as f64 * (self.truncation - l) as f64
    }

    /// Fixed variational shape of every local shrinkage factor.
    pub fn omega_shape(&self) -> f64 {
        0.5 * (self.nu + 1.0)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        for (name, v) in [("nu", self.nu), ("a1", self.a1), ("a2", self.a2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(VbError::Config(format!("{what}: {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaHyperParams {
    pub nu: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_psi: f64,
    pub b_psi: f64,
    pub j_star: usize,
}

impl Default for FaHyperParams {
    fn default() -> Self {
        Self {
            nu: 3.0,
            a1: 2.1,
            a2: 3.1,
            a_psi: 1.0,
            b_psi: 0.3,
            j_star: 5,
        }
    }
}

impl FaHyperParams {
    pub fn with_truncation(j_star: usize) -> Self {
        Self { j_star, ..Self::default() }
    }

    pub fn shrinkage(&self) -> ShrinkagePrior {
        ShrinkagePrior::new(self.nu, self.a1, self.a2, self.j_star)
    }

    pub fn validate(&self) -> Result<()> {
        self.shrinkage().validate("loadings prior")?;
        validate_psi_prior(self.a_psi, self.b_psi)?;
        if self.j_star == 0 {
            return Err(VbError::Config("j_star must be at least 1".into()));
        }
        Ok(())
    }
}

fn validate_psi_prior(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
        return Err(VbError::Config(format!(
            "idiosyncratic prior needs positive a_psi and b_psi, got ({a}, {b})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsfaHyperParams {
    pub shared: ShrinkagePrior,
    pub per_study: Vec<ShrinkagePrior>,
    pub a_psi: f64,
    pub b_psi: f64,
}

impl MsfaHyperParams {
    /// Default hyperparameters with `k_star` shared columns and `j_star[s]`
    /// study-specific columns for each study.
    pub fn with_truncations(k_star: usize, j_star: &[usize]) -> Self {
        let d = FaHyperParams::default();
        Self {
            shared: ShrinkagePrior::new(d.nu, d.a1, d.a2, k_star),
            per_study: j_star
                .iter()
                .map(|&j| ShrinkagePrior::new(d.nu, d.a1, d.a2, j))
                .collect(),
            a_psi: d.a_psi,
            b_psi: d.b_psi,
        }
    }

    pub fn num_studies(&self) -> usize {
        self.per_study.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_study.is_empty() {
            return Err(VbError::Config("at least one study is required".into()));
        }
        self.shared.validate("shared prior")?;
        for (s, prior) in self.per_study.iter().enumerate() {
            prior.validate(&format!("study {s} prior"))?;
            if self.shared.truncation + prior.truncation == 0 {
                return Err(VbError::Config(format!(
                    "study {s} has no latent factors (k_star + j_star = 0)"
                )));
            }
        }
        validate_psi_prior(self.a_psi, self.b_psi)
    }
}

/// Gamma variational factor with shape `alpha` and rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFactor {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaFactor {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let g = Self { alpha, beta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.beta.is_finite() && self.beta > 0.0) {
            return Err(VbError::Numerical(format!(
                "gamma factor must have positive finite parameters, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    /// `E[log x]` under the factor.
    pub fn expected_log(&self) -> f64 {
        digamma(self.alpha) - self.beta.ln()
    }

    pub fn entropy(&self) -> f64 {
        self.alpha - self.beta.ln() + ln_gamma(self.alpha) + (1.0 - self.alpha) * digamma(self.alpha)
    }

    /// `E[log Gamma(x; shape, rate)]` for a fixed prior.
    pub fn expected_log_prior(&self, shape: f64, rate: f64) -> f64 {
        shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * self.expected_log() - rate * self.mean()
    }
}

/// Multivariate normal variational factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GaussianRepr", try_from = "GaussianRepr")]
pub struct GaussianFactor {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Serialized form of a Gaussian factor: covariance as a list of rows.
#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl From<GaussianFactor> for GaussianRepr {
    fn from(g: GaussianFactor) -> Self {
        Self {
            mean: g.mean.iter().copied().collect(),
            cov: g.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<GaussianRepr> for GaussianFactor {
    type Error = VbError;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let d = r.mean.len();
        if r.cov.len() != d || r.cov.iter().any(|row| row.len() != d) {
            return Err(VbError::Parse(format!("Gaussian factor of dimension {d} needs a {d}x{d} covariance")));
        }
        Ok(Self {
            mean: DVector::from_vec(r.mean),
            cov: DMatrix::from_fn(d, d, |i, j| r.cov[i][j]),
        })
    }
}

impl GaussianFactor {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let g = Self { mean, cov };
        g.validate()?;
        Ok(g)
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry to 1e-12 and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(VbError::Dimension(format!(
                "gaussian factor of dim {d} has {}x{} covariance",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(VbError::Numerical("non-finite gaussian mean".into()));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-12 {
                    return Err(VbError::Numerical(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        if d > 0 && nalgebra::Cholesky::new(self.cov.clone()).is_none() {
            return Err(VbError::Numerical("covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// `E[x x^T] = mu mu^T + Sigma`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.mean * self.mean.transpose() + &self.cov
    }

    pub fn entropy(&self) -> Result<f64> {
        let d = self.dim() as f64;
        Ok(0.5 * d * (1.0 + LN_2PI) + 0.5 * linalg::spd_logdet(&self.cov)?)
    }

    /// `E[log N(x; 0, I)]`.
    pub fn expected_log_standard_normal(&self) -> f64 {
        let d = self.dim() as f64;
        -0.5 * d * LN_2PI - 0.5 * (self.mean.norm_squared() + self.cov.trace())
    }
}

/// Natural coordinates of a Gaussian factor: precision and precision times mean.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGaussian {
    pub eta1: DMatrix<f64>,
    pub eta2: DVector<f64>,
}

impl NaturalGaussian {
    pub fn from_moments(g: &GaussianFactor) -> Result<Self> {
        let eta1 = linalg::spd_inverse(&g.cov)?;
        let eta2 = &eta1 * &g.mean;
        Ok(Self { eta1, eta2 })
    }

    pub fn to_moments(&self) -> Result<GaussianFactor> {
        let cov = linalg::spd_inverse(&self.eta1)?;
        let mean = &cov * &self.eta2;
        Ok(GaussianFactor { mean, cov })
    }

    /// `(1 - rho) * self + rho * other`.
    pub fn blend(&self, other: &Self, rho: f64) -> Self {
        Self {
            eta1: linalg::symmetrize(&self.eta1 * (1.0 - rho) + &other.eta1 * rho),
            eta2: &self.eta2 * (1.0 - rho) + &other.eta2 * rho,
        }
    }
}

/// `E[tau_j] = prod_{l<=j} E[delta_l]` for the 1-based column `j`.
pub fn expected_tau(delta: &[GammaFactor], j: usize) -> Result<f64> {
    if j == 0 || j > delta.len() {
        return Err(VbError::Dimension(format!(
            "column index {j} outside 1..={}",
            delta.len()
        )));
    }
    Ok(delta[..j].iter().fold(1.0, |acc, d| acc * d.mean()))
}

/// `E[tau_j]` for every column, in column order.
pub fn cumulative_tau(delta: &[GammaFactor]) -> Vec<f64> {
    let mut acc = 1.0;
    delta
        .iter()
        .map(|d| {
            acc *= d.mean();
            acc
        })
        .collect()
}

/// `E[log tau_j]` for every column.
pub(crate) fn cumulative_log_tau(delta: &[GammaFactor]) -> Vec<f64> {
    let mut acc = 0.0;
    delta
        .iter()
        .map(|d| {
            acc += d.expected_log();
            acc
        })
        .collect()
}

pub(crate) fn ln_2pi() -> f64 {
    LN_2PI
}

/// Variational state for single-study factor analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaState {
    pub hyper: FaHyperParams,
    /// One factor per variable (row of the loading matrix), dimension `J*`.
    pub loadings: Vec<GaussianFactor>,
    /// One factor per observation, dimension `J*`.
    pub scores: Vec<GaussianFactor>,
    /// Factors for the idiosyncratic precisions.
    pub psi: Vec<GammaFactor>,
    /// `P x J*` local shrinkage factors.
    pub omega: Vec<Vec<GammaFactor>>,
    /// `J*` column multipliers.
    pub delta: Vec<GammaFactor>,
}

impl FaState {
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn p(&self) -> usize {
        self.loadings.len()
    }

    pub fn j_star(&self) -> usize {
        self.delta.len()
    }

    /// `P x J*` matrix of loading means.
    pub fn loading_means(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.loadings, self.j_star())
    }

    /// `N x J*` matrix of score means.
    pub fn score_means(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.scores, self.j_star())
    }

    pub fn psi_means(&self) -> DVector<f64> {
        DVector::from_iterator(self.psi.len(), self.psi.iter().map(GammaFactor::mean))
    }

    /// Diagonal of `E[D_p]`, the prior precision of loading row `p`.
    pub fn prior_precision(&self, p: usize) -> DVector<f64> {
        prior_precision(&self.omega[p], &cumulative_tau(&self.delta))
    }

    pub fn check_dims(&self, data: &Dataset) -> Result<()> {
        let (n, p) = data.dims();
        let j = self.j_star();
        let ok = self.n() == n
            && self.p() == p
            && self.psi.len() == p
            && self.omega.len() == p
            && self.omega.iter().all(|r| r.len() == j)
            && self.loadings.iter().all(|g| g.dim() == j)
            && self.scores.iter().all(|g| g.dim() == j);
        if !ok {
            return Err(VbError::Dimension(format!(
                "state (N={}, P={}, J*={j}) does not match data (N={n}, P={p})",
                self.n(),
                self.p()
            )));
        }
        Ok(())
    }

    /// Verifies every factor and that every `E[tau_j]` is finite and positive.
    pub fn validate(&self) -> Result<()> {
        for g in self.loadings.iter().chain(&self.scores) {
            g.validate()?;
        }
        for g in self.psi.iter().chain(self.omega.iter().flatten()).chain(&self.delta) {
            g.validate()?;
        }
        check_taus(&self.delta)
    }

    /// Means of the global Gaussian factors, flattened row by row.
    pub(crate) fn global_means(&self) -> Vec<f64> {
        flatten_means(&self.loadings)
    }

    /// Global means followed by every score mean.
    pub(crate) fn all_means(&self) -> Vec<f64> {
        let mut v = self.global_means();
        v.extend(flatten_means(&self.scores));
        v
    }
}

/// Variational state for multi-study factor analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsfaState {
    pub hyper: MsfaHyperParams,
    /// Shared loading rows, dimension `K*`.
    pub phi: Vec<GaussianFactor>,
    /// Per study, `P` study-specific loading rows of dimension `J*_s`.
    pub lambda: Vec<Vec<GaussianFactor>>,
    /// Per study, `N_s` shared-score factors of dimension `K*`.
    pub f_scores: Vec<Vec<GaussianFactor>>,
    /// Per study, `N_s` study-specific score factors of dimension `J*_s`.
    pub l_scores: Vec<Vec<GaussianFactor>>,
    /// `S x P` idiosyncratic precision factors.
    pub psi: Vec<Vec<GammaFactor>>,
    pub omega_shared: Vec<Vec<GammaFactor>>,
    pub delta_shared: Vec<GammaFactor>,
    pub omega_specific: Vec<Vec<Vec<GammaFactor>>>,
    pub delta_specific: Vec<Vec<GammaFactor>>,
}

impl MsfaState {
    pub fn num_studies(&self) -> usize {
        self.lambda.len()
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn k_star(&self) -> usize {
        self.delta_shared.len()
    }

    pub fn j_star(&self, s: usize) -> usize {
        self.delta_specific[s].len()
    }

    pub fn n_s(&self, s: usize) -> usize {
        self.f_scores[s].len()
    }

    pub fn phi_means(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.phi, self.k_star())
    }

    pub fn lambda_means(&self, s: usize) -> DMatrix<f64> {
        rows_to_matrix(&self.lambda[s], self.j_star(s))
    }

    pub fn f_means(&self, s: usize) -> DMatrix<f64> {
        rows_to_matrix(&self.f_scores[s], self.k_star())
    }

    pub fn l_means(&self, s: usize) -> DMatrix<f64> {
        rows_to_matrix(&self.l_scores[s], self.j_star(s))
    }

    pub fn psi_means(&self, s: usize) -> DVector<f64> {
        DVector::from_iterator(self.p(), self.psi[s].iter().map(GammaFactor::mean))
    }

    pub fn check_dims(&self, data: &MultiStudyDataset) -> Result<()> {
        let s_count = self.num_studies();
        if data.num_studies() != s_count || self.hyper.per_study.len() != s_count {
            return Err(VbError::Dimension(format!(
                "state has {s_count} studies, data has {}",
                data.num_studies()
            )));
        }
        let p = self.p();
        let k = self.k_star();
        if data.p() != p || self.omega_shared.len() != p || self.omega_shared.iter().any(|r| r.len() != k) {
            return Err(VbError::Dimension(format!("state P={p} does not match data P={}", data.p())));
        }
        if self.phi.iter().any(|g| g.dim() != k) {
            return Err(VbError::Dimension("shared loading rows have wrong dimension".into()));
        }
        for s in 0..s_count {
            let j = self.j_star(s);
            let n = data.studies[s].n();
            let ok = self.lambda[s].len() == p
                && self.lambda[s].iter().all(|g| g.dim() == j)
                && self.f_scores[s].len() == n
                && self.l_scores[s].len() == n
                && self.f_scores[s].iter().all(|g| g.dim() == k)
                && self.l_scores[s].iter().all(|g| g.dim() == j)
                && self.psi[s].len() == p
                && self.omega_specific[s].len() == p
                && self.omega_specific[s].iter().all(|r| r.len() == j);
            if !ok {
                return Err(VbError::Dimension(format!("study {s} state does not match its data")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let gaussians = self
            .phi
            .iter()
            .chain(self.lambda.iter().flatten())
            .chain(self.f_scores.iter().flatten())
            .chain(self.l_scores.iter().flatten());
        for g in gaussians {
            g.validate()?;
        }
        let gammas = self
            .psi
            .iter()
            .flatten()
            .chain(self.omega_shared.iter().flatten())
            .chain(&self.delta_shared)
            .chain(self.omega_specific.iter().flatten().flatten())
            .chain(self.delta_specific.iter().flatten());
        for g in gammas {
            g.validate()?;
        }
        check_taus(&self.delta_shared)?;
        for d in &self.delta_specific {
            check_taus(d)?;
        }
        Ok(())
    }

    pub(crate) fn global_means(&self) -> Vec<f64> {
        let mut v = flatten_means(&self.phi);
        for rows in &self.lambda {
            v.extend(flatten_means(rows));
        }
        v
    }

    pub(crate) fn all_means(&self) -> Vec<f64> {
        let mut v = self.global_means();
        for s in 0..self.num_studies() {
            v.extend(flatten_means(&self.f_scores[s]));
            v.extend(flatten_means(&self.l_scores[s]));
        }
        v
    }
}

fn check_taus(delta: &[GammaFactor]) -> Result<()> {
    if cumulative_tau(delta).iter().all(|t| t.is_finite() && *t > 0.0) {
        Ok(())
    } else {
        Err(VbError::Numerical("expected column shrinkage is not finite and positive".into()))
    }
}

pub(crate) fn prior_precision(omega_row: &[GammaFactor], taus: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        omega_row.len(),
        omega_row.iter().zip(taus).map(|(w, t)| w.mean() * t),
    )
}

pub(crate) fn rows_to_matrix(rows: &[GaussianFactor], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), d);
    for (i, g) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&g.mean.transpose());
    }
    m
}

fn flatten_means(rows: &[GaussianFactor]) -> Vec<f64> {
    rows.iter().flat_map(|g| g.mean.iter().copied()).collect()
}

/// An `N x P` observation matrix with the preprocessing applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub centered: bool,
    pub scaled: bool,
    /// Column means of the raw input.
    pub column_means: DVector<f64>,
    /// Column standard deviations of the raw input (`N - 1` denominator).
    pub column_sds: DVector<f64>,
}

impl Dataset {
    /// Wraps a raw matrix without transforming it.
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        Self::preprocess(x, false, false)
    }

    /// Centers the columns of `x`.
    pub fn centered(x: DMatrix<f64>) -> Result<Self> {
        Self::preprocess(x, true, false)
    }

    pub fn preprocess(mut x: DMatrix<f64>, center: bool, scale: bool) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(VbError::Dimension(format!("dataset must be non-empty, got {n}x{p}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VbError::Precondition("dataset contains NaN or infinite entries".into()));
        }
        let means = DVector::from_iterator(p, x.column_iter().map(|c| c.sum() / n as f64));
        let denom = (n.max(2) - 1) as f64;
        let sds = DVector::from_iterator(
            p,
            x.column_iter()
                .zip(means.iter())
                .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / denom).sqrt()),
        );
        for (j, mut col) in x.column_iter_mut().enumerate() {
            if center {
                col.add_scalar_mut(-means[j]);
            }
            if scale && sds[j] > 0.0 {
                col /= sds[j];
            }
        }
        Ok(Self {
            x,
            centered: center,
            scaled: scale,
            column_means: means,
            column_sds: sds,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x.shape()
    }

    /// True when every column mean is zero up to rounding.
    pub fn is_centered(&self) -> bool {
        let n = self.n() as f64;
        self.x.column_iter().all(|c| {
            let scale = c.amax().max(1.0);
            (c.sum() / n).abs() <= 1e-10 * scale
        })
    }

    pub(crate) fn require_centered(&self) -> Result<()> {
        if self.is_centered() {
            Ok(())
        } else {
            Err(VbError::Precondition("data must be column-centered".into()))
        }
    }

    /// Applies this dataset's recorded preprocessing to new raw rows.
    pub fn transform(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != self.p() {
            return Err(VbError::Dimension(format!(
                "expected {} columns, got {}",
                self.p(),
                raw.ncols()
            )));
        }
        let mut out = raw.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.centered {
                col.add_scalar_mut(-self.column_means[j]);
            }
            if self.scaled && self.column_sds[j] > 0.0 {
                col /= self.column_sds[j];
            }
        }
        Ok(out)
    }

    /// Maps rows from the preprocessed space back to raw units.
    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.scaled && self.column_sds[j] > 0.0 {
                col *= self.column_sds[j];
            }
            if self.centered {
                col.add_scalar_mut(self.column_means[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyDataset {
    pub studies: Vec<Dataset>,
}

impl MultiStudyDataset {
    pub fn new(studies: Vec<Dataset>) -> Result<Self> {
        let Some(first) = studies.first() else {
            return Err(VbError::Dimension("at least one study is required".into()));
        };
        let p = first.p();
        if let Some((s, d)) = studies.iter().enumerate().find(|(_, d)| d.p() != p) {
            return Err(VbError::Dimension(format!(
                "study {s} has {} variables, study 0 has {p}",
                d.p()
            )));
        }
        Ok(Self { studies })
    }

    pub fn num_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn p(&self) -> usize {
        self.studies[0].p()
    }

    /// Row-stacks every study into one matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let total: usize = self.studies.iter().map(Dataset::n).sum();
        let mut z = DMatrix::zeros(total, self.p());
        let mut offset = 0;
        for d in &self.studies {
            z.rows_mut(offset, d.n()).copy_from(&d.x);
            offset += d.n();
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SviConfig {
    /// Minibatch fraction; one entry broadcasts to every study.
    pub batch_fractions: Vec<f64>,
    /// Forgetting rate of the step-size schedule.
    pub kappa: f64,
    /// Delay of the step-size schedule.
    pub delay: f64,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            batch_fractions: vec![0.5],
            kappa: 0.75,
            delay: 1.0,
        }
    }
}

impl SviConfig {
    pub fn with_batch(fraction: f64) -> Self {
        Self {
            batch_fractions: vec![fraction],
            ..Self::default()
        }
    }

    pub fn fraction_for(&self, s: usize) -> f64 {
        if self.batch_fractions.len() == 1 {
            self.batch_fractions[0]
        } else {
            self.batch_fractions[s]
        }
    }

    /// Checks the schedule and that every study gets a non-empty minibatch.
    pub fn validate(&self, study_sizes: &[usize]) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return Err(VbError::Config(format!("kappa must lie in (0.5, 1], got {}", self.kappa)));
        }
        if !(self.delay.is_finite() && self.delay > 0.0) {
            return Err(VbError::Config(format!("delay must be positive, got {}", self.delay)));
        }
        if self.batch_fractions.len() != 1 && self.batch_fractions.len() != study_sizes.len() {
            return Err(VbError::Config(format!(
                "{} batch fractions given for {} studies",
                self.batch_fractions.len(),
                study_sizes.len()
            )));
        }
        for (s, &n) in study_sizes.iter().enumerate() {
            let b = self.fraction_for(s);
            if !(b > 0.0 && b <= 1.0) {
                return Err(VbError::Config(format!("batch fraction must lie in (0, 1], got {b}")));
            }
            if batch_size(n, b) == 0 {
                return Err(VbError::Config(format!(
                    "batch fraction {b} on {n} observations gives an empty minibatch"
                )));
            }
        }
        Ok(())
    }
}

/// `floor(b * n)`.
pub fn batch_size(n: usize, fraction: f64) -> usize {
    // guards 0.05 * 100 = 5.000000000000001 style rounding in both directions
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Threshold on the mean squared difference of Gaussian means between iterations.
    pub tol: f64,
    pub seed: u64,
    pub svi: Option<SviConfig>,
    pub track_elbo: bool,
    /// Target fraction of exactly-zero entries in the initial loadings.
    pub init_sparsity: f64,
}

impl FitConfig {
    pub fn cavi() -> Self {
        Self {
            max_iter: 5000,
            tol: 1e-6,
            seed: 0,
            svi: None,
            track_elbo: false,
            init_sparsity: 0.0,
        }
    }

    pub fn svi(svi: SviConfig) -> Self {
        Self {
            max_iter: 10_000,
            svi: Some(svi),
            ..Self::cavi()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(VbError::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(VbError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(0.0..1.0).contains(&self.init_sparsity) {
            return Err(VbError::Config(format!(
                "init_sparsity must lie in [0, 1), got {}",
                self.init_sparsity
            )));
        }
        Ok(())
    }

    pub(crate) fn require_svi(&self) -> Result<&SviConfig> {
        self.svi
            .as_ref()
            .ok_or_else(|| VbError::Config("stochastic fit requested without an SVI configuration".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<S> {
    pub state: S,
    pub iterations: usize,
    pub converged: bool,
    /// Convergence metric after each iteration.
    pub trace: Vec<f64>,
    pub elbo_trace: Option<Vec<f64>>,
    pub elapsed_seconds: f64,
}
