//! Python bindings: fit single- and multi-study factor models, simulate data,
//! and score fits. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use vbfactor::error::VbError;
use vbfactor::fa_cavi::fit_fa_cavi;
use vbfactor::fa_svi::fit_fa_svi;
use vbfactor::json::{self, FitDocument};
use vbfactor::metrics::{self, reconstruct_sigma_fa, reconstruct_sigma_msfa, NEAR_ZERO_THRESHOLD};
use vbfactor::model::{
    Dataset, FaHyperParams, FaState, FitConfig, FitResult, MsfaHyperParams, MsfaState, MultiStudyDataset, SviConfig,
};
use vbfactor::msfa_cavi::fit_msfa_cavi;
use vbfactor::msfa_svi::fit_msfa_svi;
use vbfactor::simulate;

type Rows = Vec<Vec<f64>>;

fn py_err(e: VbError) -> PyErr {
    match e {
        VbError::Numerical(_) | VbError::Undefined(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    json::matrix_from_rows(rows, ncols).map_err(py_err)
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    json::matrix_rows(m)
}

fn config(algo: &str, batch: f64, seed: u64, max_iter: Option<usize>, tol: f64) -> PyResult<FitConfig> {
    let base = match algo {
        "cavi" => FitConfig::cavi(),
        "svi" => FitConfig::svi(SviConfig::with_batch(batch)),
        other => return Err(PyValueError::new_err(format!("algo must be 'cavi' or 'svi', got {other:?}"))),
    };
    Ok(FitConfig {
        max_iter: max_iter.unwrap_or(base.max_iter),
        tol,
        seed,
        ..base
    })
}

/// A fitted single-study model.
#[pyclass(module = "vbfactor", frozen)]
pub struct FaFit {
    result: FitResult<FaState>,
    config: FitConfig,
    data: Dataset,
}

#[pymethods]
impl FaFit {
    #[getter]
    fn loadings(&self) -> Rows {
        to_rows(&self.result.state.loading_means())
    }

    #[getter]
    fn scores(&self) -> Rows {
        to_rows(&self.result.state.score_means())
    }

    /// Posterior mean precisions of the idiosyncratic errors.
    #[getter]
    fn psi(&self) -> Vec<f64> {
        self.result.state.psi_means().iter().copied().collect()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.result.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.result.converged
    }

    #[getter]
    fn elapsed_seconds(&self) -> f64 {
        self.result.elapsed_seconds
    }

    /// Estimated covariance in preprocessed units.
    fn sigma(&self) -> Rows {
        to_rows(&reconstruct_sigma_fa(&self.result.state).sigma)
    }

    /// Share of entries in each loading column with magnitude below `threshold`.
    #[pyo3(signature = (threshold = NEAR_ZERO_THRESHOLD))]
    fn near_zero(&self, threshold: f64) -> Vec<f64> {
        metrics::near_zero_proportion(&self.result.state.loading_means(), threshold)
    }

    /// The fit in the command-line tool's JSON layout.
    fn to_json(&self) -> PyResult<String> {
        json::to_string(&FitDocument::fa(self.result.clone(), &self.config, &self.data)).map_err(py_err)
    }
}

/// A fitted multi-study model.
#[pyclass(module = "vbfactor", frozen)]
pub struct MsfaFit {
    result: FitResult<MsfaState>,
    config: FitConfig,
    data: MultiStudyDataset,
}

impl MsfaFit {
    fn study(&self, s: usize) -> PyResult<()> {
        if s < self.result.state.num_studies() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "study {s} out of range for {} studies",
                self.result.state.num_studies()
            )))
        }
    }
}

#[pymethods]
impl MsfaFit {
    #[getter]
    fn num_studies(&self) -> usize {
        self.result.state.num_studies()
    }

    #[getter]
    fn phi(&self) -> Rows {
        to_rows(&self.result.state.phi_means())
    }

    fn lambda_(&self, study: usize) -> PyResult<Rows> {
        self.study(study)?;
        Ok(to_rows(&self.result.state.lambda_means(study)))
    }

    fn psi(&self, study: usize) -> PyResult<Vec<f64>> {
        self.study(study)?;
        Ok(self.result.state.psi_means(study).iter().copied().collect())
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.result.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.result.converged
    }

    #[getter]
    fn elapsed_seconds(&self) -> f64 {
        self.result.elapsed_seconds
    }

    /// `Phi Phi' + Lambda_s Lambda_s' + Psi_s` for one study.
    fn sigma(&self, study: usize) -> PyResult<Rows> {
        Ok(to_rows(&reconstruct_sigma_msfa(&self.result.state, study).map_err(py_err)?.sigma))
    }

    /// `Phi Phi'`.
    fn shared_covariance(&self) -> Rows {
        let phi = self.result.state.phi_means();
        to_rows(&(&phi * phi.transpose()))
    }

    fn to_json(&self) -> PyResult<String> {
        json::to_string(&FitDocument::msfa(self.result.clone(), &self.config, &self.data)).map_err(py_err)
    }
}

/// Fit a single-study model to rows of `x`.
#[pyfunction]
#[pyo3(signature = (x, j_star = 5, algo = "cavi", batch = 0.5, seed = 0, max_iter = None, tol = 1e-6, center = true, scale = false))]
#[allow(clippy::too_many_arguments)]
fn fit_fa(
    py: Python<'_>,
    x: Rows,
    j_star: usize,
    algo: &str,
    batch: f64,
    seed: u64,
    max_iter: Option<usize>,
    tol: f64,
    center: bool,
    scale: bool,
) -> PyResult<FaFit> {
    let data = Dataset::preprocess(to_matrix(&x)?, center, scale).map_err(py_err)?;
    let config = config(algo, batch, seed, max_iter, tol)?;
    let hyper = FaHyperParams::with_truncation(j_star);
    let result = py
        .detach(|| match config.svi {
            None => fit_fa_cavi(&data, &hyper, &config),
            Some(_) => fit_fa_svi(&data, &hyper, &config),
        })
        .map_err(py_err)?;
    Ok(FaFit { result, config, data })
}

/// Fit a multi-study model; `studies` holds one row list per study.
#[pyfunction]
#[pyo3(signature = (studies, k_star = 5, j_star = 5, algo = "cavi", batch = 0.5, seed = 0, max_iter = None, tol = 1e-6, center = true, scale = false))]
#[allow(clippy::too_many_arguments)]
fn fit_msfa(
    py: Python<'_>,
    studies: Vec<Rows>,
    k_star: usize,
    j_star: usize,
    algo: &str,
    batch: f64,
    seed: u64,
    max_iter: Option<usize>,
    tol: f64,
    center: bool,
    scale: bool,
) -> PyResult<MsfaFit> {
    let sets = studies
        .iter()
        .map(|x| Dataset::preprocess(to_matrix(x)?, center, scale).map_err(py_err))
        .collect::<PyResult<Vec<_>>>()?;
    let data = MultiStudyDataset::new(sets).map_err(py_err)?;
    let config = config(algo, batch, seed, max_iter, tol)?;
    let hyper = MsfaHyperParams::with_truncations(k_star, &vec![j_star; data.num_studies()]);
    let result = py
        .detach(|| match config.svi {
            None => fit_msfa_cavi(&data, &hyper, &config),
            Some(_) => fit_msfa_svi(&data, &hyper, &config),
        })
        .map_err(py_err)?;
    Ok(MsfaFit { result, config, data })
}

/// Draw a single-study truth and `n` rows from it: `(x, sigma)`.
#[pyfunction]
#[pyo3(signature = (p, n, j, seed = 0))]
fn simulate_fa(p: usize, n: usize, j: usize, seed: u64) -> PyResult<(Rows, Rows)> {
    let truth = simulate::generate_fa_truth(p, j, seed).map_err(py_err)?;
    let data = simulate::sample_fa_dataset(&truth, n, seed).map_err(py_err)?;
    Ok((to_rows(&data.x), to_rows(&truth.sigma())))
}

/// Draw a multi-study truth and data: `(studies, sigmas)`.
#[pyfunction]
#[pyo3(signature = (studies, p, n, k, j, seed = 0))]
fn simulate_msfa(studies: usize, p: usize, n: usize, k: usize, j: usize, seed: u64) -> PyResult<(Vec<Rows>, Vec<Rows>)> {
    let truth = simulate::generate_msfa_truth(studies, p, k, &vec![j; studies], seed).map_err(py_err)?;
    let data = simulate::sample_msfa_dataset(&truth, &vec![n; studies], seed).map_err(py_err)?;
    let xs = data.studies.iter().map(|d| to_rows(&d.x)).collect();
    let sigmas = (0..studies).map(|s| to_rows(&truth.sigma(s))).collect();
    Ok((xs, sigmas))
}

#[pyfunction]
fn rv_coefficient(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::rv_coefficient(&to_matrix(&a)?, &to_matrix(&b)?).map_err(py_err)
}

/// Generalized least-squares scores `(f, l)` of one observation.
#[pyfunction]
fn bartlett_scores(phi: Rows, lambda_: Rows, psi: Vec<f64>, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = metrics::bartlett_scores(
        &to_matrix(&phi)?,
        &to_matrix(&lambda_)?,
        &DVector::from_vec(psi),
        &DVector::from_vec(x),
    )
    .map_err(py_err)?;
    Ok((s.f.iter().copied().collect(), s.l.iter().copied().collect()))
}

#[pyfunction]
#[pyo3(signature = (loadings, threshold = NEAR_ZERO_THRESHOLD))]
fn near_zero_proportion(loadings: Rows, threshold: f64) -> PyResult<Vec<f64>> {
    Ok(metrics::near_zero_proportion(&to_matrix(&loadings)?, threshold))
}

/// `(t + delay)^-kappa`.
#[pyfunction]
#[pyo3(signature = (t, kappa = 0.75, delay = 1.0))]
fn step_size(t: usize, kappa: f64, delay: f64) -> f64 {
    vbfactor::fa_svi::step_size(t, &SviConfig { kappa, delay, ..SviConfig::default() })
}

#[pymodule]
#[pyo3(name = "vbfactor")]
fn vbfactor_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FaFit>()?;
    m.add_class::<MsfaFit>()?;
    m.add_function(wrap_pyfunction!(fit_fa, m)?)?;
    m.add_function(wrap_pyfunction!(fit_msfa, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_fa, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_msfa, m)?)?;
    m.add_function(wrap_pyfunction!(rv_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(bartlett_scores, m)?)?;
    m.add_function(wrap_pyfunction!(near_zero_proportion, m)?)?;
    m.add_function(wrap_pyfunction!(step_size, m)?)?;
    Ok(())
}
