//! CSV ingestion and export plus the dataset manifest.
//!
//! CSV format: comma-separated, '.'-decimal floats, optional single header
//! line starting with '#'. Labeled files carry the label as a trailing
//! integer column; the target evaluation file holds one integer label per
//! row, aligned with the target feature file. Floats are written with
//! shortest-round-trip formatting, so export/reload is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DomainDataset, Provenance};

/// Small JSON file naming the dataset's CSV parts. Paths are resolved
/// relative to the manifest's own directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub target: String,
    pub target_eval: Option<String>,
    pub classes: usize,
    pub dim: usize,
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

struct ParsedCsv {
    features: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

fn parse_csv(path: &Path, labeled: bool) -> Result<ParsedCsv> {
    let text = fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = if labeled { Some(Vec::new()) } else { None };
    let mut width: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if idx == 0 {
                continue; // optional header
            }
            return Err(parse_error(path, line_no, "unexpected comment line"));
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("ragged row: {} cells, expected {w}", cells.len()),
                ));
            }
            _ => {}
        }
        let feat_cells = if labeled {
            if cells.len() < 2 {
                return Err(parse_error(
                    path,
                    line_no,
                    "labeled rows need at least one feature and a label",
                ));
            }
            &cells[..cells.len() - 1]
        } else {
            &cells[..]
        };
        let mut row = Vec::with_capacity(feat_cells.len());
        for (col, cell) in feat_cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_error(
                    path,
                    line_no,
                    format!("non-numeric cell `{cell}` in column {col}"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("non-finite value `{cell}`"),
                ));
            }
            row.push(v);
        }
        if let Some(labels) = labels.as_mut() {
            let cell = cells[cells.len() - 1];
            let y: usize = cell.parse().map_err(|_| {
                parse_error(
                    path,
                    line_no,
                    format!("label `{cell}` is not a non-negative integer"),
                )
            })?;
            labels.push(y);
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(parse_error(path, 1, "no data rows"));
    }
    Ok(ParsedCsv { features, labels })
}

/// Label-only file: one integer per row.
fn parse_label_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line.starts_with('#')) {
            continue;
        }
        let y: usize = line.parse().map_err(|_| {
            parse_error(
                path,
                idx + 1,
                format!("label `{line}` is not a non-negative integer"),
            )
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_error(path, 1, "no label rows"));
    }
    Ok(labels)
}

/// Load a dataset from three CSV files: labeled source rows, unlabeled
/// target rows, and optionally one evaluation label per target row. Passing
/// `classes: None` infers the class count from the labels seen.
pub fn load_features_csv(
    path_source_labeled: &Path,
    path_target_unlabeled: &Path,
    path_target_eval: Option<&Path>,
    classes: Option<usize>,
) -> Result<DomainDataset> {
    let source = parse_csv(path_source_labeled, true)?;
    let target = parse_csv(path_target_unlabeled, false)?;
    let d = source.features[0].len();
    if target.features[0].len() != d {
        return Err(Error::Validation(format!(
            "source has {d} feature columns, target has {}",
            target.features[0].len()
        )));
    }
    let source_y = source.labels.expect("source parse is labeled");
    let target_y = match path_target_eval {
        Some(p) => {
            let labels = parse_label_csv(p)?;
            if labels.len() != target.features.len() {
                return Err(Error::Validation(format!(
                    "{} eval labels for {} target rows",
                    labels.len(),
                    target.features.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let observed_max = source_y
        .iter()
        .chain(target_y.iter().flatten())
        .copied()
        .max()
        .unwrap_or(0);
    let c = match classes {
        Some(c) => {
            if observed_max >= c {
                return Err(Error::Validation(format!(
                    "label {observed_max} out of range for {c} classes"
                )));
            }
            c
        }
        None => observed_max + 1,
    };
    DomainDataset::new(
        Tensor::from_rows(&source.features)?,
        source_y,
        Tensor::from_rows(&target.features)?,
        target_y,
        c,
        Provenance::Files {
            manifest: path_source_labeled.display().to_string(),
        },
    )
}

fn write_feature_csv(path: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for i in 0..x.rows() {
        let mut cells: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(labels) = labels {
            cells.push(labels[i].to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Write a dataset's three CSV parts next to each other and return the
/// manifest describing them.
pub fn export_csv(ds: &DomainDataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    write_feature_csv(&dir.join("source.csv"), ds.source_x(), Some(ds.source_y()))?;
    write_feature_csv(&dir.join("target.csv"), ds.target_x(), None)?;
    let target_eval = if ds.has_eval_labels() {
        let path = dir.join("target_eval.csv");
        let mut out = fs::File::create(&path)?;
        for &y in ds.eval_labels()? {
            writeln!(out, "{y}")?;
        }
        Some("target_eval.csv".to_string())
    } else {
        None
    };
    Ok(Manifest {
        source: "source.csv".into(),
        target: "target.csv".into(),
        target_eval,
        classes: ds.classes(),
        dim: ds.dim(),
    })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Read a manifest and load the dataset it names, validating the declared
/// class count and feature dimension.
pub fn load_manifest(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ds = load_features_csv(
        &base.join(&manifest.source),
        &base.join(&manifest.target),
        manifest
            .target_eval
            .as_ref()
            .map(|p| base.join(p))
            .as_deref(),
        Some(manifest.classes),
    )?;
    if ds.dim() != manifest.dim {
        return Err(Error::Validation(format!(
            "manifest declares dim {}, files have {}",
            manifest.dim,
            ds.dim()
        )));
    }
    ds.set_provenance(Provenance::Files {
        manifest: path.display().to_string(),
    });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_conditional_shift, ShiftFamily, ShiftSpec};

    #[test]
    fn two_row_hand_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.csv");
        let tgt = dir.path().join("t.csv");
        fs::write(&src, "1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        fs::write(&tgt, "0.5,0.5\n").unwrap();
        let ds = load_features_csv(&src, &tgt, None, None).unwrap();
        assert_eq!(ds.n_source(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.source_y(), &[0, 1]);
        assert_eq!(ds.classes(), 2);
        assert!(ds.eval_labels().is_err());
    }

    #[test]
    fn header_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.csv");
        let tgt = dir.path().join("t.csv");
        fs::write(&src, "# x0,x1,label\n1.0,2.0,0\n").unwrap();
        fs::write(&tgt, "# x0,x1\n0.5,0.5\n").unwrap();
        let ds = load_features_csv(&src, &tgt, None, Some(2)).unwrap();
        assert_eq!(ds.n_source(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.csv");
        let tgt = dir.path().join("t.csv");
        fs::write(&src, "1.0,2.0,0\n3.0,oops,1\n").unwrap();
        fs::write(&tgt, "0.5,0.5\n").unwrap();
        let err = load_features_csv(&src, &tgt, None, None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }

        fs::write(&src, "1.0,2.0,0\n3.0,4.0\n").unwrap();
        let err = load_features_csv(&src, &tgt, None, None).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("ragged"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn label_out_of_declared_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.csv");
        let tgt = dir.path().join("t.csv");
        fs::write(&src, "1.0,2.0,5\n").unwrap();
        fs::write(&tgt, "0.5,0.5\n").unwrap();
        assert!(load_features_csv(&src, &tgt, None, Some(3)).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ShiftSpec::new(ShiftFamily::ConditionalBoundary, 0.6, 99);
        let mut small = spec.clone();
        small.n_source = 40;
        small.n_target = 40;
        let ds = gen_conditional_shift(&small).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_csv(&ds, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        write_manifest(&manifest, &manifest_path).unwrap();
        let reloaded = load_manifest(&manifest_path).unwrap();
        assert_eq!(reloaded.source_x().data(), ds.source_x().data());
        assert_eq!(reloaded.target_x().data(), ds.target_x().data());
        assert_eq!(reloaded.source_y(), ds.source_y());
        assert_eq!(reloaded.eval_labels().unwrap(), ds.eval_labels().unwrap());
        assert_eq!(reloaded.classes(), ds.classes());
    }
}
