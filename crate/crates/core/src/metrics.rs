//! Accuracy metrics, covariance reconstruction, out-of-sample prediction and
//! network export.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, VbError};
use crate::linalg;
use crate::model::{FaState, GammaFactor, MsfaState};

const RANK_TOL: f64 = 1e-10;

/// A covariance point estimate. `used_fallback` is set when some precision
/// factor has shape at most 1, so its inverse-gamma mean does not exist and
/// `beta / (alpha + 1)` (the mode) was used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEstimate {
    pub sigma: DMatrix<f64>,
    pub used_fallback: bool,
}

/// Point estimates of the idiosyncratic variances and whether the mode fallback was needed.
pub fn psi_variances(psi: &[GammaFactor]) -> (DVector<f64>, bool) {
    let mut fallback = false;
    let v = DVector::from_iterator(
        psi.len(),
        psi.iter().map(|g| {
            if g.alpha > 1.0 {
                g.beta / (g.alpha - 1.0)
            } else {
                fallback = true;
                g.beta / (g.alpha + 1.0)
            }
        }),
    );
    (v, fallback)
}

fn gram_plus_diag(blocks: &[DMatrix<f64>], psi: &[GammaFactor]) -> SigmaEstimate {
    let (var, used_fallback) = psi_variances(psi);
    let mut sigma = DMatrix::from_diagonal(&var);
    for m in blocks {
        sigma += m * m.transpose();
    }
    SigmaEstimate {
        sigma: linalg::symmetrize(sigma),
        used_fallback,
    }
}

/// `M M^T + diag(E[psi^2])` from the loading means.
pub fn reconstruct_sigma_fa(state: &FaState) -> SigmaEstimate {
    gram_plus_diag(&[state.loading_means()], &state.psi)
}

/// `Phi Phi^T + Lambda_s Lambda_s^T + diag(E[psi_s^2])` from the loading means.
pub fn reconstruct_sigma_msfa(state: &MsfaState, s: usize) -> Result<SigmaEstimate> {
    if s >= state.num_studies() {
        return Err(VbError::Dimension(format!("study {s} outside 0..{}", state.num_studies())));
    }
    Ok(gram_plus_diag(&[state.phi_means(), state.lambda_means(s)], &state.psi[s]))
}

/// RV coefficient `tr(A B^T B A^T) / sqrt(tr((A A^T)^2) tr((B B^T)^2))`.
pub fn rv_coefficient(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(VbError::Dimension(format!(
            "RV needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let aa = (a * a.transpose()).norm();
    let bb = (b * b.transpose()).norm();
    if aa == 0.0 || bb == 0.0 {
        return Err(VbError::Undefined("RV coefficient of a zero matrix".into()));
    }
    Ok((b * a.transpose()).norm_squared() / (aa * bb))
}

/// Generalized least squares scores for fixed loadings `[Phi, Lambda_s]` and
/// noise variances, solved jointly and split into the two blocks.
#[derive(Debug, Clone)]
pub struct BartlettProjector {
    phi: DMatrix<f64>,
    lambda: DMatrix<f64>,
    /// `(K + J) x P` map from an observation to its stacked scores.
    solve: DMatrix<f64>,
    rank_deficient: bool,
}

impl BartlettProjector {
    /// `psi` holds the noise variances. Either loading block may have zero columns.
    pub fn new(phi: &DMatrix<f64>, lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<Self> {
        let p = psi.len();
        if phi.nrows() != p || lambda.nrows() != p {
            return Err(VbError::Dimension(format!(
                "loadings with {} and {} rows for {p} variances",
                phi.nrows(),
                lambda.nrows()
            )));
        }
        if psi.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(VbError::Precondition("noise variances must be positive".into()));
        }
        let k = phi.ncols();
        let m = k + lambda.ncols();
        let mut a = DMatrix::zeros(p, m);
        a.columns_mut(0, k).copy_from(phi);
        a.columns_mut(k, lambda.ncols()).copy_from(lambda);
        let w = psi.map(|v| 1.0 / v);
        let root_w = w.map(f64::sqrt);
        let mut weighted = a.clone();
        for (r, mut row) in weighted.row_iter_mut().enumerate() {
            row *= root_w[r];
        }
        let (pinv, rank) = linalg::pseudo_inverse(&weighted, RANK_TOL)?;
        let rank_deficient = rank < m;
        let solve = if rank_deficient {
            let mut s = pinv;
            for (c, mut col) in s.column_iter_mut().enumerate() {
                col *= root_w[c];
            }
            s
        } else {
            let mut atw = a.transpose();
            for (c, mut col) in atw.column_iter_mut().enumerate() {
                col *= w[c];
            }
            let chol = linalg::spd_cholesky(&(&atw * &a))?;
            chol.solve(&atw)
        };
        Ok(Self {
            phi: phi.clone(),
            lambda: lambda.clone(),
            solve,
            rank_deficient,
        })
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Stacked scores for each row of `x` (`N x (K + J)`).
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.solve.ncols() {
            return Err(VbError::Dimension(format!(
                "expected {} variables, got {}",
                self.solve.ncols(),
                x.ncols()
            )));
        }
        Ok(x * self.solve.transpose())
    }

    /// `Phi f + Lambda l` for each row of `x`.
    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let scores = self.scores(x)?;
        let k = self.phi.ncols();
        let j = self.lambda.ncols();
        Ok(scores.columns(0, k) * self.phi.transpose() + scores.columns(k, j) * self.lambda.transpose())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BartlettScores {
    pub f: DVector<f64>,
    pub l: DVector<f64>,
    pub rank_deficient: bool,
}

pub fn bartlett_scores(
    phi: &DMatrix<f64>,
    lambda_s: &DMatrix<f64>,
    psi_s: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<BartlettScores> {
    let proj = BartlettProjector::new(phi, lambda_s, psi_s)?;
    let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
    let scores = proj.scores(&row)?;
    let k = phi.ncols();
    let stacked = DVector::from_row_slice(scores.as_slice());
    Ok(BartlettScores {
        f: stacked.rows(0, k).into_owned(),
        l: stacked.rows(k, lambda_s.ncols()).into_owned(),
        rank_deficient: proj.rank_deficient(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Msfa,
    Stacked,
    Independent,
}

/// Source of loadings for prediction.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Shared and study-specific loadings of a multi-study fit for one study.
    Msfa { state: &'a MsfaState, study: usize },
    /// A single-study fit on the row-stacked data; its loadings act as shared loadings.
    Stacked(&'a FaState),
    /// A single-study fit on one study; its loadings act as study-specific loadings.
    Independent(&'a FaState),
}

impl Predictor<'_> {
    pub fn mode(&self) -> PredictionMode {
        match self {
            Predictor::Msfa { .. } => PredictionMode::Msfa,
            Predictor::Stacked(_) => PredictionMode::Stacked,
            Predictor::Independent(_) => PredictionMode::Independent,
        }
    }

    pub fn projector(&self) -> Result<BartlettProjector> {
        match *self {
            Predictor::Msfa { state, study } => {
                if study >= state.num_studies() {
                    return Err(VbError::Dimension(format!("study {study} outside 0..{}", state.num_studies())));
                }
                let (var, _) = psi_variances(&state.psi[study]);
                BartlettProjector::new(&state.phi_means(), &state.lambda_means(study), &var)
            }
            Predictor::Stacked(state) => {
                let (var, _) = psi_variances(&state.psi);
                BartlettProjector::new(&state.loading_means(), &DMatrix::zeros(state.p(), 0), &var)
            }
            Predictor::Independent(state) => {
                let (var, _) = psi_variances(&state.psi);
                BartlettProjector::new(&DMatrix::zeros(state.p(), 0), &state.loading_means(), &var)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x_hat: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// Reconstructs each row of `x_new` from its Bartlett scores.
pub fn predict(predictor: Predictor<'_>, x_new: &DMatrix<f64>) -> Result<Prediction> {
    let proj = predictor.projector()?;
    Ok(Prediction {
        x_hat: proj.reconstruct(x_new)?,
        rank_deficient: proj.rank_deficient(),
    })
}

/// Sum of squared errors per observation (row), averaged over rows.
pub fn mse(x: &DMatrix<f64>, x_hat: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(VbError::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if x.nrows() == 0 {
        return Err(VbError::Dimension("no observations".into()));
    }
    Ok((x - x_hat).norm_squared() / x.nrows() as f64)
}

pub const NEAR_ZERO_THRESHOLD: f64 = 0.01;

/// Fraction of entries in each column with magnitude below `threshold`.
pub fn near_zero_proportion(loadings_mean: &DMatrix<f64>, threshold: f64) -> Vec<f64> {
    let p = loadings_mean.nrows().max(1) as f64;
    loadings_mean
        .column_iter()
        .map(|c| c.iter().filter(|v| v.abs() < threshold).count() as f64 / p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub weight: f64,
}

pub const EDGE_THRESHOLD: f64 = 0.5;

/// Undirected edges `i < j` whose entry has magnitude at least `threshold`.
pub fn export_edges(shared_cov: &DMatrix<f64>, threshold: f64, names: Option<&[String]>) -> Result<Vec<Edge>> {
    let p = shared_cov.nrows();
    if !shared_cov.is_square() {
        return Err(VbError::Dimension(format!("expected a square matrix, got {:?}", shared_cov.shape())));
    }
    if let Some(n) = names {
        if n.len() != p {
            return Err(VbError::Dimension(format!("{} names for {p} variables", n.len())));
        }
    }
    let label = |i: usize| names.map_or_else(|| format!("V{}", i + 1), |n| n[i].clone());
    let mut edges = Vec::new();
    for i in 0..p {
        for j in (i + 1)..p {
            let w = shared_cov[(i, j)];
            if w.abs() >= threshold {
                edges.push(Edge {
                    source: label(i),
                    target: label(j),
                    weight: w,
                });
            }
        }
    }
    Ok(edges)
}

/// Degree of every node that appears in at least one edge, in first-seen order.
pub fn node_degrees(edges: &[Edge]) -> Vec<(String, usize)> {
    let mut degrees: Vec<(String, usize)> = Vec::new();
    for e in edges {
        for name in [&e.source, &e.target] {
            match degrees.iter_mut().find(|(n, _)| n == name) {
                Some((_, d)) => *d += 1,
                None => degrees.push((name.clone(), 1)),
            }
        }
    }
    degrees
}

/// Sample mean and standard deviation (`n - 1` denominator; zero for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
