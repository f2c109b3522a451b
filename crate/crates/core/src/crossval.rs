//! K-fold cross-validation of out-of-sample reconstruction error for a
//! multi-study fit against independent and stacked single-study fits.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Result, VbError};
use crate::fa_cavi::fit_fa_cavi;
use crate::fa_svi::fit_fa_svi;
use crate::metrics::{mean_sd, predict, Predictor};
use crate::model::{Dataset, FaHyperParams, FaState, FitConfig, MsfaHyperParams, MultiStudyDataset};
use crate::msfa_cavi::fit_msfa_cavi;
use crate::msfa_svi::fit_msfa_svi;
use crate::rng;

/// Fold label of every row of one study: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64, study: usize) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(VbError::Config(format!("{k} folds for {n} observations")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::FOLDS, study as u64]));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone)]
pub struct CvSpec {
    pub folds: usize,
    pub seed: u64,
    pub center: bool,
    pub scale: bool,
    pub msfa: MsfaHyperParams,
    /// Used for both the independent and the stacked fits.
    pub fa: FaHyperParams,
    /// Stochastic fits are used when `svi` is set.
    pub config: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerMethod {
    pub msfa: f64,
    pub independent: f64,
    pub stacked: f64,
}

impl PerMethod {
    fn summarize(rows: &[PerMethod]) -> (PerMethod, PerMethod) {
        let col = |f: fn(&PerMethod) -> f64| mean_sd(&rows.iter().map(f).collect::<Vec<_>>());
        let (m0, s0) = col(|r| r.msfa);
        let (m1, s1) = col(|r| r.independent);
        let (m2, s2) = col(|r| r.stacked);
        (
            PerMethod { msfa: m0, independent: m1, stacked: m2 },
            PerMethod { msfa: s0, independent: s1, stacked: s2 },
        )
    }
}

/// Held-out MSE (squared error per test row, pooled over studies) and fit seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub mse: PerMethod,
    pub seconds: PerMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mse_mean: PerMethod,
    pub mse_sd: PerMethod,
    pub seconds_mean: PerMethod,
    pub seconds_sd: PerMethod,
}

impl CvReport {
    fn new(folds: Vec<FoldResult>) -> Self {
        let (mse_mean, mse_sd) = PerMethod::summarize(&folds.iter().map(|f| f.mse).collect::<Vec<_>>());
        let (seconds_mean, seconds_sd) = PerMethod::summarize(&folds.iter().map(|f| f.seconds).collect::<Vec<_>>());
        Self {
            folds,
            mse_mean,
            mse_sd,
            seconds_mean,
            seconds_sd,
        }
    }
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn fit_fa(data: &Dataset, spec: &CvSpec) -> Result<FaState> {
    Ok(match spec.config.svi {
        Some(_) => fit_fa_svi(data, &spec.fa, &spec.config)?.state,
        None => fit_fa_cavi(data, &spec.fa, &spec.config)?.state,
    })
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs every fold. Each study is preprocessed with its training rows only and
/// the same transform is applied to its held-out rows.
pub fn cross_validate(studies: &[DMatrix<f64>], spec: &CvSpec) -> Result<CvReport> {
    if studies.is_empty() {
        return Err(VbError::Dimension("no studies".into()));
    }
    if spec.msfa.num_studies() != studies.len() {
        return Err(VbError::Config(format!(
            "multi-study hyperparameters describe {} studies, data has {}",
            spec.msfa.num_studies(),
            studies.len()
        )));
    }
    let labels = studies
        .iter()
        .enumerate()
        .map(|(s, x)| fold_assignment(x.nrows(), spec.folds, spec.seed, s))
        .collect::<Result<Vec<_>>>()?;

    let mut results = Vec::with_capacity(spec.folds);
    for fold in 0..spec.folds {
        let mut train = Vec::with_capacity(studies.len());
        let mut test = Vec::with_capacity(studies.len());
        for (x, lab) in studies.iter().zip(&labels) {
            let (held, kept): (Vec<usize>, Vec<usize>) = (0..x.nrows()).partition(|&i| lab[i] == fold);
            let d = Dataset::preprocess(select_rows(x, &kept), spec.center, spec.scale)?;
            test.push(d.transform(&select_rows(x, &held))?);
            train.push(d);
        }
        let train = MultiStudyDataset::new(train)?;
        let stacked = Dataset::new(train.stacked())?;

        let (msfa, t_msfa) = timed(|| {
            Ok(match spec.config.svi {
                Some(_) => fit_msfa_svi(&train, &spec.msfa, &spec.config)?.state,
                None => fit_msfa_cavi(&train, &spec.msfa, &spec.config)?.state,
            })
        })?;
        let (indep, t_indep) = timed(|| train.studies.iter().map(|d| fit_fa(d, spec)).collect::<Result<Vec<_>>>())?;
        let (stack, t_stack) = timed(|| fit_fa(&stacked, spec))?;

        let mut sse = [0.0; 3];
        let rows: usize = test.iter().map(DMatrix::nrows).sum();
        for (s, x) in test.iter().enumerate() {
            let predictors = [
                Predictor::Msfa { state: &msfa, study: s },
                Predictor::Independent(&indep[s]),
                Predictor::Stacked(&stack),
            ];
            for (acc, pred) in sse.iter_mut().zip(predictors) {
                *acc += (x - predict(pred, x)?.x_hat).norm_squared();
            }
        }
        let n = rows as f64;
        results.push(FoldResult {
            fold,
            mse: PerMethod {
                msfa: sse[0] / n,
                independent: sse[1] / n,
                stacked: sse[2] / n,
            },
            seconds: PerMethod {
                msfa: t_msfa,
                independent: t_indep,
                stacked: t_stack,
            },
        });
    }
    Ok(CvReport::new(results))
}
