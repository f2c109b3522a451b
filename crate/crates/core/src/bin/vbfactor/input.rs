use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use vbfactor::io;

/// Raw study matrices after the optional variance filter.
pub struct Input {
    pub raw: Vec<DMatrix<f64>>,
    pub names: Option<Vec<String>>,
    pub selected: Option<Vec<usize>>,
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn load(path: &Path, filter_top_var: Option<f64>) -> Result<Input> {
    let studies = io::read_input(path).with_context(|| format!("reading {}", path.display()))?;
    let mut names = studies[0].header.clone();
    let mut raw: Vec<DMatrix<f64>> = studies.into_iter().map(|s| s.data).collect();
    let mut selected = None;
    if let Some(f) = filter_top_var {
        let cols = io::top_variance_columns(&raw, f)?;
        raw = raw.iter().map(|m| select_columns(m, &cols)).collect();
        names = names.map(|n| cols.iter().map(|&j| n[j].clone()).collect());
        selected = Some(cols);
    }
    Ok(Input { raw, names, selected })
}

/// Applies a stored column selection to new raw data.
pub fn reselect(raw: Vec<DMatrix<f64>>, selected: Option<&[usize]>) -> Result<Vec<DMatrix<f64>>> {
    let Some(cols) = selected else {
        return Ok(raw);
    };
    raw.into_iter()
        .map(|m| {
            if let Some(&bad) = cols.iter().find(|&&j| j >= m.ncols()) {
                return Err(vbfactor::error::VbError::Dimension(format!(
                    "fit kept input column {bad} but the data has {} columns",
                    m.ncols()
                ))
                .into());
            }
            Ok(select_columns(&m, cols))
        })
        .collect()
}
