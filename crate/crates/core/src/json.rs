//! JSON documents for fitted states, simulation truths and reports.
//!
//! Every real number is written with 17 significant digits so documents
//! round-trip bit-exactly and repeat runs produce identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::error::{Result, VbError};
use crate::model::{Dataset, FaState, FitConfig, FitResult, MsfaState, MultiStudyDataset};
use crate::simulate::{FaTruth, MsfaTruth};

/// Compact JSON with reals in `{:.16e}` form.
struct Digits17;

impl Formatter for Digits17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Digits17);
    value.serialize(&mut ser)?;
    String::from_utf8(out).map_err(|e| VbError::Parse(e.to_string()))
}

pub fn from_str<T: DeserializeOwned>(s: &str) -> Result<T> {
    Ok(serde_json::from_str(s)?)
}

pub fn write_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_string(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_str(&fs::read_to_string(path)?)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from rows; `ncols` is used when there are no rows.
pub fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    let c = rows.first().map_or(ncols, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(VbError::Parse("matrix rows have different lengths".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

/// A fitted state tagged with its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum FittedState {
    Fa(FaState),
    Msfa(MsfaState),
}

impl FittedState {
    pub fn dims(&self) -> Dims {
        match self {
            FittedState::Fa(s) => Dims {
                studies: 1,
                p: s.p(),
                n: vec![s.n()],
                k_star: 0,
                j_star: vec![s.j_star()],
            },
            FittedState::Msfa(s) => Dims {
                studies: s.num_studies(),
                p: s.p(),
                n: (0..s.num_studies()).map(|k| s.n_s(k)).collect(),
                k_star: s.k_star(),
                j_star: (0..s.num_studies()).map(|k| s.j_star(k)).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub studies: usize,
    pub p: usize,
    pub n: Vec<usize>,
    /// Shared truncation; zero for single-study fits.
    pub k_star: usize,
    pub j_star: Vec<usize>,
}

/// Column transform applied to one study before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub centered: bool,
    pub scaled: bool,
    pub column_means: Vec<f64>,
    pub column_sds: Vec<f64>,
}

impl Preprocessing {
    pub fn of(d: &Dataset) -> Self {
        Self {
            centered: d.centered,
            scaled: d.scaled,
            column_means: d.column_means.iter().copied().collect(),
            column_sds: d.column_sds.iter().copied().collect(),
        }
    }

    /// Applies the stored transform to raw rows.
    pub fn apply(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.column_means.len();
        if raw.ncols() != p {
            return Err(VbError::Dimension(format!("expected {p} columns, got {}", raw.ncols())));
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

    /// Maps rows from the transformed space back to raw units.
    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
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

/// A fit written by the command-line tool: the state's fields at the top
/// level next to the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    #[serde(flatten)]
    pub state: FittedState,
    pub dims: Dims,
    pub algorithm: String,
    pub iterations: usize,
    pub converged: bool,
    pub elapsed_seconds: Option<f64>,
    pub trace: Vec<f64>,
    pub elbo_trace: Option<Vec<f64>>,
    pub config: FitConfig,
    pub preprocessing: Vec<Preprocessing>,
    /// Input columns kept by a variance filter, in input order.
    #[serde(default)]
    pub selected_columns: Option<Vec<usize>>,
    #[serde(default)]
    pub variable_names: Option<Vec<String>>,
}

impl FitDocument {
    pub fn fa(result: FitResult<FaState>, config: &FitConfig, data: &Dataset) -> Self {
        Self::build(FittedState::Fa(result.state.clone()), result, config, vec![Preprocessing::of(data)])
    }

    pub fn msfa(result: FitResult<MsfaState>, config: &FitConfig, data: &MultiStudyDataset) -> Self {
        let pre = data.studies.iter().map(Preprocessing::of).collect();
        Self::build(FittedState::Msfa(result.state.clone()), result, config, pre)
    }

    fn build<S>(state: FittedState, r: FitResult<S>, config: &FitConfig, preprocessing: Vec<Preprocessing>) -> Self {
        Self {
            dims: state.dims(),
            state,
            algorithm: if config.svi.is_some() { "svi" } else { "cavi" }.to_string(),
            iterations: r.iterations,
            converged: r.converged,
            elapsed_seconds: Some(r.elapsed_seconds),
            trace: r.trace,
            elbo_trace: r.elbo_trace,
            config: config.clone(),
            preprocessing,
            selected_columns: None,
            variable_names: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
enum TruthRepr {
    Fa {
        lambda: Vec<Vec<f64>>,
        psi: Vec<f64>,
    },
    Msfa {
        phi: Vec<Vec<f64>>,
        lambdas: Vec<Vec<Vec<f64>>>,
        psis: Vec<Vec<f64>>,
    },
}

/// A simulation truth of either model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TruthRepr", try_from = "TruthRepr")]
pub enum Truth {
    Fa(FaTruth),
    Msfa(MsfaTruth),
}

impl From<Truth> for TruthRepr {
    fn from(t: Truth) -> Self {
        match t {
            Truth::Fa(t) => TruthRepr::Fa {
                lambda: matrix_rows(&t.lambda),
                psi: t.psi.iter().copied().collect(),
            },
            Truth::Msfa(t) => TruthRepr::Msfa {
                phi: matrix_rows(&t.phi),
                lambdas: t.lambdas.iter().map(matrix_rows).collect(),
                psis: t.psis.iter().map(|v| v.iter().copied().collect()).collect(),
            },
        }
    }
}

impl TryFrom<TruthRepr> for Truth {
    type Error = VbError;

    fn try_from(r: TruthRepr) -> Result<Self> {
        Ok(match r {
            TruthRepr::Fa { lambda, psi } => Truth::Fa(FaTruth {
                lambda: matrix_from_rows(&lambda, 0)?,
                psi: DVector::from_vec(psi),
            }),
            TruthRepr::Msfa { phi, lambdas, psis } => Truth::Msfa(MsfaTruth {
                phi: matrix_from_rows(&phi, 0)?,
                lambdas: lambdas
                    .iter()
                    .map(|l| matrix_from_rows(l, 0))
                    .collect::<Result<_>>()?,
                psis: psis.into_iter().map(DVector::from_vec).collect(),
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fa_cavi::fit_fa_cavi;
    use crate::model::FaHyperParams;
    use crate::simulate::{generate_fa_truth, generate_msfa_truth, sample_fa_dataset};

    #[test]
    fn reals_use_seventeen_digits() {
        assert_eq!(to_string(&0.1).unwrap(), "1.0000000000000001e-1");
        assert_eq!(to_string(&vec![1.0, -2.5]).unwrap(), "[1.0000000000000000e0,-2.5000000000000000e0]");
        assert_eq!(to_string(&f64::NAN).unwrap(), "null");
    }

    #[test]
    fn awkward_reals_round_trip_exactly() {
        let values = vec![
            0.1 + 0.2,
            std::f64::consts::PI,
            1e-300,
            f64::MIN_POSITIVE,
            5e-324,
            f64::MAX,
            -123456.789e-7,
        ];
        let back: Vec<f64> = from_str(&to_string(&values).unwrap()).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fit_document_round_trips() {
        let t = generate_fa_truth(6, 2, 1).unwrap();
        let d = Dataset::centered(sample_fa_dataset(&t, 40, 1).unwrap().x).unwrap();
        let config = FitConfig::cavi();
        let result = fit_fa_cavi(&d, &FaHyperParams::with_truncation(3), &config).unwrap();
        let doc = FitDocument::fa(result, &config, &d);
        let text = to_string(&doc).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["model", "dims", "loadings", "scores", "psi", "omega", "delta"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        assert_eq!(value["model"], "fa");
        let back: FitDocument = from_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(to_string(&back).unwrap(), text);
    }

    #[test]
    fn truth_round_trips() {
        let t = Truth::Msfa(generate_msfa_truth(2, 5, 1, &[2, 0], 3).unwrap());
        let back: Truth = from_str(&to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        let t = Truth::Fa(generate_fa_truth(4, 2, 3).unwrap());
        assert_eq!(from_str::<Truth>(&to_string(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn malformed_factor_is_rejected() {
        let bad = r#"{"mean":[1.0,2.0],"cov":[[1.0]]}"#;
        assert!(from_str::<crate::model::GaussianFactor>(bad).is_err());
    }
}
