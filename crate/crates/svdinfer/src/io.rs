//! CSV and JSON helpers.
//!
//! Input matrices are headerless, comma-separated, one observation per row.
//! Output tables start with a `#schema=1` comment line followed by a header
//! row; floats are written with 17 significant digits so they round-trip
//! exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::SvdFit;

/// First line of every CSV table written by this crate.
pub const SCHEMA_LINE: &str = "#schema=1";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Reads a headerless numeric CSV into a matrix. Lines starting with `#` are
/// skipped.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!(
                        "{}: row {}: cannot parse {field:?} as a number",
                        path.display(),
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no data rows", path.display())));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

/// Writes a matrix as a headerless CSV with 17-significant-digit floats.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..m.nrows() {
        let line: Vec<String> = m.row(i).iter().map(|&x| fmt_f64(x)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a versioned table: the schema line, the header, then `rows`.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SCHEMA_LINE}")?;
    {
        let mut csv_w = csv::Writer::from_writer(&mut w);
        csv_w.write_record(header)?;
        for row in rows {
            csv_w.write_record(row)?;
        }
        csv_w.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a versioned table written by [`write_table`]: returns the header and
/// the rows. Fails if the schema line is missing or names another version.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(2, '\n');
    let first = lines.next().unwrap_or("").trim_end();
    if first != SCHEMA_LINE {
        return Err(Error::InvalidInput(format!(
            "{}: expected first line {SCHEMA_LINE:?}, found {first:?}",
            path.display()
        )));
    }
    let body = lines.next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = reader.headers()?.iter().map(str::to_owned).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

/// Serializable form of an [`SvdFit`] plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub rank: usize,
    /// Rank returned by the selector, before any override.
    pub selected_rank: usize,
    pub rank_overridden: bool,
    pub d: Vec<f64>,
    /// Left vectors, one inner vector per layer.
    pub left: Vec<Vec<f64>>,
    /// Right vectors, one inner vector per layer.
    pub right: Vec<Vec<f64>>,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: Vec<usize>,
}

impl FitFile {
    pub fn to_fit(&self) -> Result<SvdFit> {
        let r = self.d.len();
        if r == 0 || r != self.rank || self.left.len() != r || self.right.len() != r {
            return Err(Error::InvalidInput("fit file has inconsistent rank".into()));
        }
        let p = self.left[0].len();
        let q = self.right[0].len();
        if self.left.iter().any(|c| c.len() != p) || self.right.iter().any(|c| c.len() != q) {
            return Err(Error::InvalidInput("fit file has ragged vectors".into()));
        }
        let left = DMatrix::from_fn(p, r, |i, k| self.left[k][i]);
        let right = DMatrix::from_fn(q, r, |i, k| self.right[k][i]);
        SvdFit::new(DVector::from_vec(self.d.clone()), left, right)
    }

    pub fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.column_iter().map(|c| c.iter().copied().collect()).collect()
    }
}
