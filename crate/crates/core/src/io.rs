//! CSV matrices and multi-study manifests.
//!
//! A data file has one observation per row and one variable per column. A
//! header row is detected when some field of the first line is not a number.
//! A manifest is a JSON object `{"studies": ["a.csv", ...]}` whose paths are
//! relative to the manifest's directory.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Result, VbError};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvMatrix {
    pub data: DMatrix<f64>,
    pub header: Option<Vec<String>>,
}

fn parse_error(path: &Path, msg: impl std::fmt::Display) -> VbError {
    VbError::Parse(format!("{}: {msg}", path.display()))
}

pub fn read_csv_matrix(path: &Path) -> Result<CsvMatrix> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut header = None;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_error(path, e))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(|f| f.parse::<f64>().ok()).collect();
        if line == 0 && parsed.iter().any(Option::is_none) {
            header = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(parse_error(path, format!("line {} has {} fields, expected {w}", line + 1, record.len())));
            }
            _ => width = Some(record.len()),
        }
        for (col, v) in parsed.into_iter().enumerate() {
            let v = v.ok_or_else(|| parse_error(path, format!("line {} field {} is not a number", line + 1, col + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_error(path, "no data rows"));
    }
    let cols = width.unwrap_or(0);
    Ok(CsvMatrix {
        data: DMatrix::from_row_slice(rows, cols, &values),
        header,
    })
}

/// Writes rows with the shortest representation that parses back to the same value.
pub fn write_csv_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| parse_error(path, e))?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| parse_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Default variable labels `V1, V2, ...`.
pub fn default_labels(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("V{j}")).collect()
}

#[derive(Deserialize)]
struct Manifest {
    studies: Vec<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    if m.studies.is_empty() {
        return Err(parse_error(path, "manifest lists no studies"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(m.studies.into_iter().map(|p| if p.is_absolute() { p } else { base.join(p) }).collect())
}

/// Reads a single CSV, or every study listed by a `.json` manifest.
pub fn read_input(path: &Path) -> Result<Vec<CsvMatrix>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let studies = read_manifest(path)?
            .iter()
            .map(|p| read_csv_matrix(p))
            .collect::<Result<Vec<_>>>()?;
        let p = studies[0].data.ncols();
        if let Some(bad) = studies.iter().position(|s| s.data.ncols() != p) {
            return Err(VbError::Dimension(format!(
                "study {bad} has {} columns, study 0 has {p}",
                studies[bad].data.ncols()
            )));
        }
        Ok(studies)
    } else {
        Ok(vec![read_csv_matrix(path)?])
    }
}

/// Indices of the variables whose sample variance is in the top `fraction`
/// of at least one study.
pub fn top_variance_columns(studies: &[DMatrix<f64>], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(VbError::Config(format!("variance filter fraction must lie in (0, 1], got {fraction}")));
    }
    let p = studies.first().map_or(0, DMatrix::ncols);
    let keep_count = ((fraction * p as f64).ceil() as usize).clamp(1, p.max(1));
    let mut keep = vec![false; p];
    for x in studies {
        if x.nrows() < 2 {
            return Err(VbError::Config("variance filter needs at least two rows per study".into()));
        }
        let n = x.nrows() as f64;
        let mut vars: Vec<(usize, f64)> = x
            .column_iter()
            .enumerate()
            .map(|(j, c)| {
                let m = c.mean();
                (j, c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
            })
            .collect();
        vars.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in vars.iter().take(keep_count) {
            keep[j] = true;
        }
    }
    Ok((0..p).filter(|&j| keep[j]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn header_detection_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        fs::write(&a, "g1,g2\n1,2.5\n-3,4e-2\n").unwrap();
        let m = read_csv_matrix(&a).unwrap();
        assert_eq!(m.header.as_deref(), Some(&["g1".to_string(), "g2".to_string()][..]));
        assert_eq!(m.data, DMatrix::from_row_slice(2, 2, &[1.0, 2.5, -3.0, 0.04]));

        let b = dir.path().join("b.csv");
        fs::write(&b, "1,2\n3,4\n").unwrap();
        assert!(read_csv_matrix(&b).unwrap().header.is_none());

        let x = DMatrix::from_row_slice(2, 2, &[0.1 + 0.2, 1e-300, -7.0, std::f64::consts::E]);
        let c = dir.path().join("c.csv");
        write_csv_matrix(&c, &x, Some(&default_labels(2))).unwrap();
        let back = read_csv_matrix(&c).unwrap();
        assert_eq!(back.data, x);
        assert_eq!(back.header.unwrap()[1], "V2");
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = dir.path().join("r.csv");
        fs::write(&ragged, "1,2\n3\n").unwrap();
        assert!(read_csv_matrix(&ragged).is_err());
        let text = dir.path().join("t.csv");
        fs::write(&text, "1,2\n3,x\n").unwrap();
        assert!(read_csv_matrix(&text).is_err());
        let empty = dir.path().join("e.csv");
        fs::write(&empty, "a,b\n").unwrap();
        assert!(read_csv_matrix(&empty).is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths_and_checks_widths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2\n3,4\n").unwrap();
        fs::write(dir.path().join("b.csv"), "5,6\n").unwrap();
        fs::write(dir.path().join("c.csv"), "5,6,7\n").unwrap();
        let good = dir.path().join("good.json");
        fs::write(&good, r#"{"studies": ["a.csv", "b.csv"]}"#).unwrap();
        let studies = read_input(&good).unwrap();
        assert_eq!(studies.len(), 2);
        assert_eq!(studies[1].data.nrows(), 1);
        let bad = dir.path().join("bad.json");
        fs::write(&bad, r#"{"studies": ["a.csv", "c.csv"]}"#).unwrap();
        assert!(matches!(read_input(&bad), Err(VbError::Dimension(_))));
    }

    #[test]
    fn variance_filter_takes_union_over_studies() {
        let a = DMatrix::from_row_slice(3, 4, &[0.0, 0.0, 0.0, 10.0, 1.0, 0.1, 0.0, -10.0, 2.0, 0.2, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 4, &[5.0, 0.0, 0.0, 0.0, -5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.1]);
        assert_eq!(top_variance_columns(&[a.clone()], 0.25).unwrap(), vec![3]);
        assert_eq!(top_variance_columns(&[a, b], 0.25).unwrap(), vec![0, 3]);
    }
}
