use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vbfactor::error::VbError;
use vbfactor::fa_cavi::fit_fa_cavi;
use vbfactor::fa_svi::fit_fa_svi;
use vbfactor::json;
use vbfactor::metrics::{mean_sd, reconstruct_sigma_fa, reconstruct_sigma_msfa, rv_coefficient};
use vbfactor::model::{batch_size, Dataset, FaHyperParams, FitConfig, MsfaHyperParams, MultiStudyDataset, SviConfig};
use vbfactor::msfa_cavi::fit_msfa_cavi;
use vbfactor::msfa_svi::fit_msfa_svi;
use vbfactor::simulate::{generate_fa_truth, generate_msfa_truth, sample_fa_dataset, sample_msfa_dataset};

use crate::{Algo, ModelKind, OutputArgs};

#[derive(Args)]
pub struct BenchmarkCmd {
    /// Scenario grid (JSON)
    #[arg(long)]
    grid: PathBuf,
    /// Output prefix; writes `<out>.csv` and `<out>.json`
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

fn one() -> Vec<usize> {
    vec![1]
}

fn replicates() -> usize {
    1
}

/// Every combination of `p`, `n` (per study), `studies` and algorithm is one
/// cell; `svi` expands into one cell per batch fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub model: ModelKind,
    pub p: Vec<usize>,
    pub n: Vec<usize>,
    #[serde(default = "one")]
    pub studies: Vec<usize>,
    pub algorithms: Vec<Algo>,
    #[serde(default)]
    pub batch_fractions: Vec<f64>,
    #[serde(default = "replicates")]
    pub replicates: usize,
    /// True number of (study-specific) factors
    pub j: usize,
    pub j_star: usize,
    /// True number of shared factors; defaults to `j`
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_star: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub delay: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct CellSpec {
    p: usize,
    n: usize,
    studies: usize,
    algo: Algo,
    batch: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct CellResult {
    model: ModelKind,
    p: usize,
    n: usize,
    studies: usize,
    algorithm: Algo,
    batch_fraction: Option<f64>,
    batch_size: Option<usize>,
    replicates: usize,
    seconds_mean: Option<f64>,
    seconds_sd: Option<f64>,
    rv_mean: f64,
    rv_sd: f64,
    iterations_mean: f64,
    iterations_sd: f64,
    converged: usize,
}

impl Grid {
    fn cells(&self) -> Result<Vec<CellSpec>> {
        let err = |m: &str| anyhow::Error::from(VbError::Config(m.into()));
        if self.p.is_empty() || self.n.is_empty() || self.algorithms.is_empty() || self.studies.is_empty() {
            return Err(err("grid needs non-empty p, n, studies and algorithms"));
        }
        if self.replicates == 0 {
            return Err(err("replicates must be at least 1"));
        }
        if self.model == ModelKind::Fa && self.studies != [1] {
            return Err(err("single-study grids take studies = [1]"));
        }
        if self.algorithms.contains(&Algo::Svi) && self.batch_fractions.is_empty() {
            return Err(err("svi cells need batch_fractions"));
        }
        let mut cells = Vec::new();
        for &p in &self.p {
            for &n in &self.n {
                for &studies in &self.studies {
                    for &algo in &self.algorithms {
                        let batches: Vec<Option<f64>> = match algo {
                            Algo::Cavi => vec![None],
                            Algo::Svi => self.batch_fractions.iter().map(|&b| Some(b)).collect(),
                        };
                        for batch in batches {
                            cells.push(CellSpec { p, n, studies, algo, batch });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    fn config(&self, cell: &CellSpec, seed: u64) -> FitConfig {
        let base = match cell.batch {
            None => FitConfig::cavi(),
            Some(b) => {
                let d = SviConfig::with_batch(b);
                FitConfig::svi(SviConfig {
                    kappa: self.kappa.unwrap_or(d.kappa),
                    delay: self.delay.unwrap_or(d.delay),
                    ..d
                })
            }
        };
        FitConfig {
            max_iter: self.max_iter.unwrap_or(base.max_iter),
            tol: self.tol.unwrap_or(base.tol),
            seed,
            ..base
        }
    }

    /// Fit seconds, mean RV against the truth, and iteration count of one replicate.
    fn replicate(&self, cell: &CellSpec, r: usize) -> Result<(f64, f64, usize, bool)> {
        let seed = self.seed + r as u64;
        let config = self.config(cell, seed);
        match self.model {
            ModelKind::Fa => {
                let truth = generate_fa_truth(cell.p, self.j, seed)?;
                let data = Dataset::centered(sample_fa_dataset(&truth, cell.n, seed)?.x)?;
                let hyper = FaHyperParams::with_truncation(self.j_star);
                let res = match cell.algo {
                    Algo::Cavi => fit_fa_cavi(&data, &hyper, &config)?,
                    Algo::Svi => fit_fa_svi(&data, &hyper, &config)?,
                };
                let rv = rv_coefficient(&reconstruct_sigma_fa(&res.state).sigma, &truth.sigma())?;
                Ok((res.elapsed_seconds, rv, res.iterations, res.converged))
            }
            ModelKind::Msfa => {
                let s = cell.studies;
                let truth = generate_msfa_truth(s, cell.p, self.k.unwrap_or(self.j), &vec![self.j; s], seed)?;
                let raw = sample_msfa_dataset(&truth, &vec![cell.n; s], seed)?;
                let data = MultiStudyDataset::new(
                    raw.studies
                        .into_iter()
                        .map(|d| Dataset::centered(d.x))
                        .collect::<vbfactor::error::Result<_>>()?,
                )?;
                let hyper = MsfaHyperParams::with_truncations(self.k_star.unwrap_or(self.j_star), &vec![self.j_star; s]);
                let res = match cell.algo {
                    Algo::Cavi => fit_msfa_cavi(&data, &hyper, &config)?,
                    Algo::Svi => fit_msfa_svi(&data, &hyper, &config)?,
                };
                let mut rv = 0.0;
                for k in 0..s {
                    rv += rv_coefficient(&reconstruct_sigma_msfa(&res.state, k)?.sigma, &truth.sigma(k))?;
                }
                Ok((res.elapsed_seconds, rv / s as f64, res.iterations, res.converged))
            }
        }
    }

    fn run_cell(&self, cell: &CellSpec, timing: bool) -> Result<CellResult> {
        let runs = (0..self.replicates)
            .map(|r| self.replicate(cell, r))
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&(f64, f64, usize, bool)) -> f64| mean_sd(&runs.iter().map(f).collect::<Vec<_>>());
        let (seconds_mean, seconds_sd) = col(|r| r.0);
        let (rv_mean, rv_sd) = col(|r| r.1);
        let (iterations_mean, iterations_sd) = col(|r| r.2 as f64);
        Ok(CellResult {
            model: self.model,
            p: cell.p,
            n: cell.n,
            studies: cell.studies,
            algorithm: cell.algo,
            batch_fraction: cell.batch,
            batch_size: cell.batch.map(|b| batch_size(cell.n, b)),
            replicates: self.replicates,
            seconds_mean: timing.then_some(seconds_mean),
            seconds_sd: timing.then_some(seconds_sd),
            rv_mean,
            rv_sd,
            iterations_mean,
            iterations_sd,
            converged: runs.iter().filter(|r| r.3).count(),
        })
    }
}

/// High-water resident set size in kB, where the OS reports it.
fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn thread_count() -> Result<Option<usize>> {
    match std::env::var("VBFACTOR_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(VbError::Config(format!("VBFACTOR_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

pub fn run(c: BenchmarkCmd) -> Result<()> {
    let text = fs::read_to_string(&c.grid).with_context(|| format!("reading {}", c.grid.display()))?;
    let grid: Grid = serde_json::from_str(&text)
        .map_err(|e| VbError::Parse(format!("{}: {e}", c.grid.display())))?;
    let cells = grid.cells()?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    let timing = !c.output.omit_timing;
    let results = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| grid.run_cell(cell, timing))
            .collect::<Result<Vec<_>>>()
    })?;

    let csv_path = c.out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;

    let json_path = c.out.with_extension("json");
    let doc = json!({
        "metadata": {
            "grid": grid,
            "threads": pool.current_num_threads(),
            "peak_rss_kb": if timing { peak_rss_kb() } else { None },
        },
        "cells": results,
    });
    json::write_file(&json_path, &doc)?;
    for r in &results {
        eprintln!(
            "{:?} {:?} p={} n={} b={:?}: rv {:.3}({:.3})",
            r.model, r.algorithm, r.p, r.n, r.batch_fraction, r.rv_mean, r.rv_sd
        );
    }
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
