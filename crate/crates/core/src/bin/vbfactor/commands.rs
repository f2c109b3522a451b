use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};
use vbfactor::crossval::{cross_validate, CvSpec};
use vbfactor::error::VbError;
use vbfactor::fa_cavi::fit_fa_cavi;
use vbfactor::fa_svi::fit_fa_svi;
use vbfactor::io;
use vbfactor::json::{self, FitDocument, FittedState, Preprocessing, Truth};
use vbfactor::metrics::{
    export_edges, near_zero_proportion, predict as reconstruct, reconstruct_sigma_fa, reconstruct_sigma_msfa,
    rv_coefficient, Predictor, EDGE_THRESHOLD, NEAR_ZERO_THRESHOLD,
};
use vbfactor::model::{Dataset, FaHyperParams, FitConfig, MsfaHyperParams, MultiStudyDataset, SviConfig};
use vbfactor::msfa_cavi::fit_msfa_cavi;
use vbfactor::msfa_svi::fit_msfa_svi;
use vbfactor::simulate::{generate_fa_truth, generate_msfa_truth, sample_fa_dataset, sample_msfa_dataset};

use crate::input::{self, Input};
use crate::{Algo, FitArgs, ModelKind, OutputArgs};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    VbError::Config(msg.into()).into()
}

impl FitArgs {
    pub fn config(&self) -> FitConfig {
        let base = match self.algo {
            Algo::Cavi => FitConfig::cavi(),
            Algo::Svi => FitConfig::svi(SviConfig {
                batch_fractions: self.batch.clone(),
                kappa: self.kappa,
                delay: self.delay,
            }),
        };
        FitConfig {
            max_iter: self.max_iter.unwrap_or(base.max_iter),
            tol: self.tol,
            seed: self.seed,
            track_elbo: self.track_elbo,
            init_sparsity: self.init_sparsity,
            ..base
        }
    }

    pub fn fa_hyper(&self) -> Result<FaHyperParams> {
        match self.jstar[..] {
            [j] => Ok(FaHyperParams::with_truncation(j)),
            _ => Err(config_error("a single-study fit takes one --jstar value")),
        }
    }

    pub fn msfa_hyper(&self, studies: usize) -> Result<MsfaHyperParams> {
        let js = match self.jstar.len() {
            1 => vec![self.jstar[0]; studies],
            n if n == studies => self.jstar.clone(),
            n => return Err(config_error(format!("{n} --jstar values for {studies} studies"))),
        };
        Ok(MsfaHyperParams::with_truncations(self.kstar, &js))
    }

    fn preprocess(&self, raw: &[DMatrix<f64>]) -> Result<Vec<Dataset>> {
        Ok(raw
            .iter()
            .map(|x| Dataset::preprocess(x.clone(), self.center, self.scale))
            .collect::<vbfactor::error::Result<_>>()?)
    }
}

#[derive(Args)]
pub struct FitCmd {
    #[arg(long, value_enum, default_value = "fa")]
    model: ModelKind,
    /// CSV file, or a JSON manifest listing one CSV per study
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    output: OutputArgs,
}

pub fn fit(c: FitCmd) -> Result<()> {
    let Input { raw, names, selected } = input::load(&c.data, c.fit.filter_top_var)?;
    let mut studies = c.fit.preprocess(&raw)?;
    let config = c.fit.config();
    let mut doc = match c.model {
        ModelKind::Fa => {
            if studies.len() != 1 {
                return Err(config_error(format!(
                    "--model fa takes one study, the manifest lists {}",
                    studies.len()
                )));
            }
            let data = studies.remove(0);
            let hyper = c.fit.fa_hyper()?;
            let result = match c.fit.algo {
                Algo::Cavi => fit_fa_cavi(&data, &hyper, &config)?,
                Algo::Svi => fit_fa_svi(&data, &hyper, &config)?,
            };
            FitDocument::fa(result, &config, &data)
        }
        ModelKind::Msfa => {
            let data = MultiStudyDataset::new(studies)?;
            let hyper = c.fit.msfa_hyper(data.num_studies())?;
            let result = match c.fit.algo {
                Algo::Cavi => fit_msfa_cavi(&data, &hyper, &config)?,
                Algo::Svi => fit_msfa_svi(&data, &hyper, &config)?,
            };
            FitDocument::msfa(result, &config, &data)
        }
    };
    doc.selected_columns = selected;
    doc.variable_names = names;
    if c.output.omit_timing {
        doc.elapsed_seconds = None;
    }
    json::write_file(&c.out, &doc).with_context(|| format!("writing {}", c.out.display()))?;
    eprintln!(
        "{} iterations, converged: {}, wrote {}",
        doc.iterations,
        doc.converged,
        c.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct SimulateCmd {
    #[arg(long, value_enum, default_value = "fa")]
    model: ModelKind,
    /// Number of variables
    #[arg(long)]
    p: usize,
    /// Observations (single-study model)
    #[arg(long)]
    n: Option<usize>,
    /// Observations per study, comma separated
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    /// True number of factors (single-study model)
    #[arg(long)]
    j: Option<usize>,
    /// True number of shared factors
    #[arg(long)]
    k: Option<usize>,
    /// True number of study-specific factors; one value or one per study
    #[arg(long, value_delimiter = ',')]
    js: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    outdir: PathBuf,
}

pub fn simulate(c: SimulateCmd) -> Result<()> {
    fs::create_dir_all(&c.outdir).with_context(|| format!("creating {}", c.outdir.display()))?;
    let labels = io::default_labels(c.p);
    let truth_path = c.outdir.join("truth.json");
    match c.model {
        ModelKind::Fa => {
            let (Some(n), Some(j)) = (c.n, c.j) else {
                return Err(config_error("--model fa needs --n and --j"));
            };
            let truth = generate_fa_truth(c.p, j, c.seed)?;
            let data = sample_fa_dataset(&truth, n, c.seed)?;
            let path = c.outdir.join("data.csv");
            io::write_csv_matrix(&path, &data.x, Some(&labels))?;
            json::write_file(&truth_path, &Truth::Fa(truth))?;
            eprintln!("wrote {} and {}", path.display(), truth_path.display());
        }
        ModelKind::Msfa => {
            let s = c.ns.len();
            if s == 0 {
                return Err(config_error("--model msfa needs --ns"));
            }
            let k = c.k.ok_or_else(|| config_error("--model msfa needs --k"))?;
            let js = match c.js.len() {
                1 => vec![c.js[0]; s],
                n if n == s => c.js.clone(),
                n => return Err(config_error(format!("{n} --js values for {s} studies"))),
            };
            let truth = generate_msfa_truth(s, c.p, k, &js, c.seed)?;
            let data = sample_msfa_dataset(&truth, &c.ns, c.seed)?;
            let mut files = Vec::with_capacity(s);
            for (i, d) in data.studies.iter().enumerate() {
                let name = format!("study_{}.csv", i + 1);
                io::write_csv_matrix(&c.outdir.join(&name), &d.x, Some(&labels))?;
                files.push(name);
            }
            let manifest = c.outdir.join("manifest.json");
            json::write_file(&manifest, &json!({ "studies": files }))?;
            json::write_file(&truth_path, &Truth::Msfa(truth))?;
            eprintln!("wrote {} and {}", manifest.display(), truth_path.display());
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct PredictCmd {
    /// New observations: CSV file or JSON manifest
    #[arg(long)]
    data: PathBuf,
    /// Fitted state written by `fit`
    #[arg(long, required_unless_present = "cv", conflicts_with = "cv")]
    state: Option<PathBuf>,
    /// Study index (from 0) used when a multi-study state is applied to one CSV
    #[arg(long)]
    study: Option<usize>,
    /// Run k-fold cross-validation of the multi-study, independent and stacked fits
    #[arg(long)]
    cv: Option<usize>,
    /// Truncation of the single-study fits during cross-validation
    #[arg(long, default_value_t = 10)]
    fa_jstar: usize,
    /// Predictions CSV, or the per-fold table with --cv
    #[arg(long)]
    out: PathBuf,
    /// Also write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Serialize)]
struct StudyError {
    study: usize,
    rows: usize,
    mse: f64,
    rank_deficient: bool,
}

fn suffixed(path: &Path, study: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_study{study}.{ext}"))
}

fn emit_report(value: &Value, path: Option<&Path>) -> Result<()> {
    println!("{}", json::to_string(value)?);
    if let Some(p) = path {
        json::write_file(p, value)?;
    }
    Ok(())
}

pub fn predict(c: PredictCmd) -> Result<()> {
    match (c.cv, &c.state) {
        (Some(k), _) => cross_validation(&c, k),
        (None, Some(state)) => predict_from_state(&c, state),
        (None, None) => Err(config_error("either --state or --cv is required")),
    }
}

fn predict_from_state(c: &PredictCmd, state_path: &Path) -> Result<()> {
    let doc: FitDocument = json::read_file(state_path).with_context(|| format!("reading {}", state_path.display()))?;
    let inputs = io::read_input(&c.data).with_context(|| format!("reading {}", c.data.display()))?;
    let raw = input::reselect(inputs.into_iter().map(|m| m.data).collect(), doc.selected_columns.as_deref())?;
    let studies: Vec<usize> = match (&doc.state, raw.len(), c.study) {
        (FittedState::Fa(_), 1, None | Some(0)) => vec![0],
        (FittedState::Fa(_), _, _) => return Err(config_error("a single-study state predicts one CSV")),
        (FittedState::Msfa(s), 1, Some(k)) if k < s.num_studies() => vec![k],
        (FittedState::Msfa(s), 1, None) if s.num_studies() == 1 => vec![0],
        (FittedState::Msfa(s), n, None) if n == s.num_studies() => (0..n).collect(),
        (FittedState::Msfa(s), n, k) => return Err(config_error(format!(
            "{n} data files and study {k:?} do not match a state with {} studies",
            s.num_studies()
        ))),
    };
    let mut errors = Vec::with_capacity(raw.len());
    let (mut sse, mut rows) = (0.0, 0);
    for (x_raw, &s) in raw.iter().zip(&studies) {
        let pre: &Preprocessing = &doc.preprocessing[s];
        let x = pre.apply(x_raw)?;
        let predictor = match &doc.state {
            FittedState::Fa(st) => Predictor::Independent(st),
            FittedState::Msfa(st) => Predictor::Msfa { state: st, study: s },
        };
        let pred = reconstruct(predictor, &x)?;
        let study_sse = (&x - &pred.x_hat).norm_squared();
        sse += study_sse;
        rows += x.nrows();
        let path = if raw.len() == 1 { c.out.clone() } else { suffixed(&c.out, s) };
        io::write_csv_matrix(&path, &pre.invert(&pred.x_hat), doc.variable_names.as_deref())?;
        errors.push(StudyError {
            study: s,
            rows: x.nrows(),
            mse: study_sse / x.nrows() as f64,
            rank_deficient: pred.rank_deficient,
        });
    }
    let mode = match doc.state {
        FittedState::Fa(_) => "independent",
        FittedState::Msfa(_) => "msfa",
    };
    let report = json!({ "mode": mode, "studies": errors, "mse": sse / rows as f64 });
    emit_report(&report, c.report.as_deref())
}

fn cross_validation(c: &PredictCmd, k: usize) -> Result<()> {
    let Input { raw, .. } = input::load(&c.data, c.fit.filter_top_var)?;
    let spec = CvSpec {
        folds: k,
        seed: c.fit.seed,
        center: c.fit.center,
        scale: c.fit.scale,
        msfa: c.fit.msfa_hyper(raw.len())?,
        fa: FaHyperParams::with_truncation(c.fa_jstar),
        config: c.fit.config(),
    };
    let report = cross_validate(&raw, &spec)?;

    let mut w = csv::Writer::from_path(&c.out).with_context(|| format!("writing {}", c.out.display()))?;
    w.write_record(["fold", "msfa", "independent", "stacked"])?;
    for f in &report.folds {
        w.write_record([
            f.fold.to_string(),
            f.mse.msfa.to_string(),
            f.mse.independent.to_string(),
            f.mse.stacked.to_string(),
        ])?;
    }
    let (m, s) = (report.mse_mean, report.mse_sd);
    w.write_record([
        "mean(sd)".to_string(),
        format!("{:.6}({:.6})", m.msfa, s.msfa),
        format!("{:.6}({:.6})", m.independent, s.independent),
        format!("{:.6}({:.6})", m.stacked, s.stacked),
    ])?;
    w.flush()?;

    let mut value = serde_json::to_value(&report)?;
    value["relative_mse"] = json!({
        "msfa": 1.0,
        "independent": m.independent / m.msfa,
        "stacked": m.stacked / m.msfa,
    });
    if c.output.omit_timing {
        value["seconds_mean"] = Value::Null;
        value["seconds_sd"] = Value::Null;
        for f in value["folds"].as_array_mut().into_iter().flatten() {
            f["seconds"] = Value::Null;
        }
    }
    emit_report(&value, c.report.as_deref())
}

#[derive(Args)]
pub struct MetricsCmd {
    /// Fitted state written by `fit`
    #[arg(long)]
    state: PathBuf,
    /// Truth written by `simulate`
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Restricts a truth covariance to the fitted columns and puts an estimate in raw units.
fn comparable(
    est: DMatrix<f64>,
    truth: DMatrix<f64>,
    pre: &Preprocessing,
    selected: Option<&[usize]>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let truth = match selected {
        Some(cols) => {
            if cols.iter().any(|&j| j >= truth.nrows()) {
                bail!(VbError::Dimension("truth has fewer variables than the fit's input".into()));
            }
            DMatrix::from_fn(cols.len(), cols.len(), |a, b| truth[(cols[a], cols[b])])
        }
        None => truth,
    };
    if truth.shape() != est.shape() {
        bail!(VbError::Dimension(format!(
            "truth is {:?}, estimate is {:?}",
            truth.shape(),
            est.shape()
        )));
    }
    let est = if pre.scaled {
        let d = &pre.column_sds;
        DMatrix::from_fn(est.nrows(), est.ncols(), |a, b| est[(a, b)] * d[a] * d[b])
    } else {
        est
    };
    Ok((est, truth))
}

pub fn metrics(c: MetricsCmd) -> Result<()> {
    let doc: FitDocument = json::read_file(&c.state).with_context(|| format!("reading {}", c.state.display()))?;
    let truth: Truth = json::read_file(&c.truth).with_context(|| format!("reading {}", c.truth.display()))?;
    let selected = doc.selected_columns.as_deref();
    let mut rv = Vec::new();
    let mut fallback = Vec::new();
    let report = match (&doc.state, &truth) {
        (FittedState::Fa(st), Truth::Fa(t)) => {
            let est = reconstruct_sigma_fa(st);
            let (a, b) = comparable(est.sigma, t.sigma(), &doc.preprocessing[0], selected)?;
            rv.push(rv_coefficient(&a, &b)?);
            fallback.push(est.used_fallback);
            json!({
                "model": "fa",
                "near_zero": near_zero_proportion(&st.loading_means(), NEAR_ZERO_THRESHOLD),
            })
        }
        (FittedState::Msfa(st), Truth::Msfa(t)) => {
            if t.num_studies() != st.num_studies() {
                bail!(VbError::Dimension(format!(
                    "truth has {} studies, state has {}",
                    t.num_studies(),
                    st.num_studies()
                )));
            }
            for s in 0..st.num_studies() {
                let est = reconstruct_sigma_msfa(st, s)?;
                let (a, b) = comparable(est.sigma, t.sigma(s), &doc.preprocessing[s], selected)?;
                rv.push(rv_coefficient(&a, &b)?);
                fallback.push(est.used_fallback);
            }
            json!({
                "model": "msfa",
                "near_zero_shared": near_zero_proportion(&st.phi_means(), NEAR_ZERO_THRESHOLD),
                "near_zero": (0..st.num_studies())
                    .map(|s| near_zero_proportion(&st.lambda_means(s), NEAR_ZERO_THRESHOLD))
                    .collect::<Vec<_>>(),
            })
        }
        _ => return Err(config_error("state and truth describe different models")),
    };
    let mut report = report;
    report["rv_mean"] = json!(rv.iter().sum::<f64>() / rv.len() as f64);
    report["rv"] = json!(rv);
    report["used_fallback"] = json!(fallback);
    emit_report(&report, c.out.as_deref())
}

#[derive(Args)]
pub struct EdgesCmd {
    /// Fitted state; the shared covariance is the Gram matrix of the shared (or only) loading means
    #[arg(long, required_unless_present = "cov")]
    state: Option<PathBuf>,
    /// A square matrix CSV to threshold directly
    #[arg(long, conflicts_with = "state")]
    cov: Option<PathBuf>,
    #[arg(long, default_value_t = EDGE_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn edges(c: EdgesCmd) -> Result<()> {
    let (cov, names) = match (&c.state, &c.cov) {
        (Some(path), _) => {
            let doc: FitDocument = json::read_file(path).with_context(|| format!("reading {}", path.display()))?;
            let m = match &doc.state {
                FittedState::Fa(st) => st.loading_means(),
                FittedState::Msfa(st) => st.phi_means(),
            };
            (&m * m.transpose(), doc.variable_names)
        }
        (None, Some(path)) => {
            let m = io::read_csv_matrix(path)?;
            (m.data, m.header)
        }
        (None, None) => return Err(config_error("either --state or --cov is required")),
    };
    let edges = export_edges(&cov, c.threshold, names.as_deref())?;
    let mut w = csv::Writer::from_path(&c.out).with_context(|| format!("writing {}", c.out.display()))?;
    w.write_record(["source", "target", "weight"])?;
    for e in &edges {
        w.write_record([e.source.as_str(), e.target.as_str(), &e.weight.to_string()])?;
    }
    w.flush()?;
    let nodes = vbfactor::metrics::node_degrees(&edges).len();
    println!("{}", json!({ "edges": edges.len(), "nodes": nodes }));
    Ok(())
}
