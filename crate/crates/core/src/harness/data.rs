//! CSV ingestion and whitening.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::DataMatrix;
use crate::{Error, Matrix, Result};

/// Largest accepted condition number of `XXᵀ`.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative tolerance of the ingest-time whitening spot check.
const IDENTITY_CHECK_TOL: f64 = 1e-9;

/// Layout of sample data in a CSV file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One sample per row, one feature per column.
    #[default]
    SamplesAsRows,
    /// One sample per column.
    SamplesAsColumns,
}

/// Raw regression data with samples as columns: `x` is `h×n`, `y_raw` is `e×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub x: Matrix,
    pub y_raw: Matrix,
}

impl RawDataset {
    pub fn new(x: Matrix, y_raw: Matrix) -> Result<Self> {
        if x.ncols() != y_raw.ncols() {
            return Err(Error::shape(format!(
                "X has {} samples but Y has {}",
                x.ncols(),
                y_raw.ncols()
            )));
        }
        if x.is_empty() || y_raw.is_empty() {
            return Err(Error::shape("empty dataset"));
        }
        Ok(RawDataset { x, y_raw })
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }
}

/// `(XXᵀ)^{1/2}` and `(XXᵀ)^{-1/2}` after checking `n ≥ h` and the
/// condition number.
fn gram_roots(x: &Matrix) -> Result<(Matrix, Matrix)> {
    let (h, n) = x.shape();
    if n < h {
        return Err(Error::Conditioning(format!(
            "{n} samples cannot whiten {h} features"
        )));
    }
    let gram = x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 0.0) || !(max / min < MAX_CONDITION) {
        return Err(Error::Conditioning(format!(
            "XXᵀ has eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let q = &eig.eigenvectors;
    let root = q * Matrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose();
    let inv_root =
        q * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * q.transpose();
    Ok((root, inv_root))
}

/// `Y = 𝒴Xᵀ(XXᵀ)^{-1/2}`, optionally scaled to unit Frobenius norm.
pub fn whiten(raw: &RawDataset, normalize: bool) -> Result<DataMatrix> {
    let (root, inv_root) = gram_roots(&raw.x)?;
    let y = &raw.y_raw * raw.x.transpose() * inv_root;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (e, h) = y.shape();
    let gaps: Vec<f64> = (0..5)
        .map(|_| {
            let w = Matrix::from_fn(e, h, |_, _| rng.random::<f64>() - 0.5);
            whitening_gap(raw, &y, &root, &w)
        })
        .collect();
    let spread = gaps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - gaps.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let scale = raw.y_raw.norm_squared().max(1.0);
    if spread > IDENTITY_CHECK_TOL * scale {
        log::warn!("whitening identity spot check off by {spread:e}");
    }

    let data = DataMatrix::new(y)?;
    if normalize {
        data.normalized()
    } else {
        Ok(data)
    }
}

/// `||𝒴 - WX||² - ||Y - W(XXᵀ)^{1/2}||²` for a product matrix `W`; constant
/// in `W` when `Y` is the whitened target.
pub fn whitening_gap(raw: &RawDataset, y: &Matrix, root: &Matrix, w: &Matrix) -> f64 {
    (&raw.y_raw - w * &raw.x).norm_squared() - (y - w * root).norm_squared()
}

/// `(XXᵀ)^{1/2}`, for evaluating [`whitening_gap`].
pub fn gram_root(raw: &RawDataset) -> Result<Matrix> {
    gram_roots(&raw.x).map(|(root, _)| root)
}

fn parse_cells(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record
        .iter()
        .map(|c| c.trim().parse::<f64>().ok())
        .collect()
}

/// Parses a rectangular numeric CSV. A first row with any non-numeric cell is
/// taken as a header and skipped.
pub fn parse_matrix_csv<R: Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(k + 1);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let cells = match parse_cells(&record) {
            Some(cells) => cells,
            None if k == 0 => continue,
            None => {
                let bad = record
                    .iter()
                    .find(|c| c.trim().parse::<f64>().is_err())
                    .unwrap_or("");
                return Err(Error::Parse {
                    line,
                    msg: format!("non-numeric cell {bad:?}"),
                });
            }
        };
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {w} fields, found {}", cells.len()),
                });
            }
            Some(_) => {}
        }
        rows.push(cells);
    }
    let Some(width) = width else {
        return Err(Error::Parse {
            line: 1,
            msg: "no numeric rows".into(),
        });
    };
    Ok(Matrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    parse_matrix_csv(File::open(path)?)
}

/// Round-trip exact float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|x| fmt_f64(*x)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    File::create(path)?.write_all(format_matrix_csv(m).as_bytes())?;
    Ok(())
}

/// Reads `X` and `Y` files and arranges both with samples as columns.
pub fn ingest_csv(path_x: &Path, path_y: &Path, orientation: Orientation) -> Result<RawDataset> {
    let orient = |m: Matrix| match orientation {
        Orientation::SamplesAsRows => m.transpose(),
        Orientation::SamplesAsColumns => m,
    };
    let x = orient(read_matrix_csv(path_x)?);
    let y = orient(read_matrix_csv(path_y)?);
    log::info!(
        "ingested X {}×{} and Y {}×{} (features × samples)",
        x.nrows(),
        x.ncols(),
        y.nrows(),
        y.ncols()
    );
    RawDataset::new(x, y)
}
