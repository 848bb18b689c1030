//! Feature matrices and label vectors: in-memory types plus the two on-disk
//! feature formats (CSV and little-endian `f32` with a JSON sidecar).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used to decide that a row already has unit L2 norm.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Dense `n_rows x n_cols` matrix of finite `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Validation(format!(
                "feature matrix must be non-empty, got {n_rows}x{n_cols}"
            )));
        }
        if data.len() != n_rows * n_cols {
            return Err(Error::Validation(format!(
                "expected {} values for a {n_rows}x{n_cols} matrix, got {}",
                n_rows * n_cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature value in row {}",
                pos / n_cols
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
        })
    }

    /// Build from row vectors; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(Error::Validation(format!(
                "row {i} has {} columns, expected {n_cols}",
                rows[i].len()
            )));
        }
        Self::new(rows.len(), n_cols, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_cols)
    }

    pub(crate) fn from_parts_unchecked(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n_rows * n_cols);
        Self {
            n_rows,
            n_cols,
            data,
        }
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// A zero row cannot be normalized and is reported with its index.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.n_cols).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Validation(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self::from_parts_unchecked(self.n_rows, self.n_cols, data))
    }

    pub fn is_unit_norm(&self) -> bool {
        self.rows().all(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - 1.0).abs() <= UNIT_NORM_TOL
        })
    }
}

/// Features together with observed (noisy) labels and, for evaluation runs,
/// the clean labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: FeatureMatrix,
        noisy_labels: Vec<usize>,
        clean_labels: Option<Vec<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if noisy_labels.len() != features.n_rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} feature rows",
                noisy_labels.len(),
                features.n_rows()
            )));
        }
        check_label_range(&noisy_labels, n_classes)?;
        if let Some(clean) = &clean_labels {
            if clean.len() != noisy_labels.len() {
                return Err(Error::Validation(format!(
                    "{} clean labels but {} noisy labels",
                    clean.len(),
                    noisy_labels.len()
                )));
            }
            check_label_range(clean, n_classes)?;
        }
        Ok(Self {
            features,
            noisy_labels,
            clean_labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }
}

pub fn check_label_range(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(i) = labels.iter().position(|&l| l >= n_classes) {
        return Err(Error::Validation(format!(
            "label {} at index {i} is outside [0, {n_classes})",
            labels[i]
        )));
    }
    Ok(())
}

/// Number of classes implied by a label vector (`max + 1`).
pub fn infer_num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Csv,
    /// `<name>.f32` little-endian payload with a `<name>.json` sidecar.
    Raw,
}

impl FeatureFormat {
    /// `.csv` (any case) selects CSV, everything else the raw format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Raw,
        }
    }
}

/// Sidecar describing a raw feature payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    match format {
        FeatureFormat::Csv => load_features_csv(path),
        FeatureFormat::Raw => load_features_raw(path),
    }
}

fn load_features_csv(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let mut data = Vec::new();
    let mut n_cols = 0;
    let mut n_rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            // A non-numeric first line is a header.
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: e.to_string(),
                })
            }
        };
        if n_rows == 0 {
            n_cols = values.len();
        } else if values.len() != n_cols {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {line} has {} columns, expected {n_cols}", values.len()),
            });
        }
        if let Some(c) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value in row {n_rows}, column {c} of {}",
                path.display()
            )));
        }
        data.extend(values);
        n_rows += 1;
    }
    FeatureMatrix::new(n_rows, n_cols, data)
}

fn load_features_raw(path: &Path) -> Result<FeatureMatrix> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&side_text).map_err(|e| Error::Format {
        path: side_path.clone(),
        msg: e.to_string(),
    })?;
    if sidecar.dtype != "f32" {
        return Err(Error::Format {
            path: side_path,
            msg: format!("unsupported dtype {:?}, expected \"f32\"", sidecar.dtype),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.rows * sidecar.cols;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "sidecar declares {}x{} = {expected} floats but file holds {} bytes",
                sidecar.rows,
                sidecar.cols,
                bytes.len()
            ),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    FeatureMatrix::new(sidecar.rows, sidecar.cols, data)
}

/// Write features as little-endian `f32` plus sidecar. Values are narrowed.
pub fn write_features_raw(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.data().len() * 4);
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = RawSidecar {
        rows: features.n_rows(),
        cols: features.n_cols(),
        dtype: "f32".to_owned(),
    };
    let side_path = sidecar_path(path);
    let text = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
}

pub fn write_features_csv(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in features.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read class indices, one non-negative integer per line.
///
/// With `column` set the file is read as CSV with a header row and the named
/// column is used instead.
pub fn load_labels(path: &Path, column: Option<&str>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels = match column {
        None => parse_label_lines(path, &text)?,
        Some(name) => parse_label_column(path, &text, name)?,
    };
    if labels.is_empty() {
        return Err(Error::Validation(format!(
            "label file {} is empty",
            path.display()
        )));
    }
    Ok(labels)
}

fn parse_label_token(path: &Path, line: usize, token: &str) -> Result<usize> {
    token.parse::<usize>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected a non-negative integer, found {token:?}"),
    })
}

fn parse_label_lines(path: &Path, text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_token(path, i + 1, l.trim()))
        .collect()
}

fn parse_label_column(path: &Path, text: &str, name: &str) -> Result<Vec<usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let col = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("no column named {name:?}"),
        })?;
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let token = record.get(col).unwrap_or("");
        labels.push(parse_label_token(path, line, token)?);
    }
    Ok(labels)
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}
