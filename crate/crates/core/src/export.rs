//! Matrix export as CSV tables and 8-bit PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// How matrix values map to grey levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shade {
    /// `[-1, 1] ↦ [0, 255]`, for correlations and sign matrices.
    Signed,
    /// `[0, 1] ↦ [0, 255]`, for distances and rates.
    Unit,
}

/// Header row of labels, then one line per matrix row, every value printed
/// with 17 significant digits.
pub fn csv_string(labels: &[String], cols: usize, values: &[f64]) -> Result<String> {
    if labels.len() != cols || cols == 0 || !values.len().is_multiple_of(cols) {
        return Err(Error::shape("csv export", &[labels.len(), values.len()], &[cols]));
    }
    let mut out = labels.join(",");
    out.push('\n');
    for row in values.chunks_exact(cols) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, labels: &[String], cols: usize, values: &[f64]) -> Result<()> {
    fs::write(path, csv_string(labels, cols, values)?)?;
    Ok(())
}

/// Reads a matrix written by [`csv_string`]: labels and row-major values.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<f64>)> {
    let mut lines = text.lines();
    let labels: Vec<String> = lines
        .next()
        .ok_or(Error::Empty("csv"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("csv row {i}: {e}")))?;
        if row.len() != labels.len() {
            return Err(Error::Config(format!("csv row {i} has {} values", row.len())));
        }
        values.extend(row);
    }
    Ok((labels, values))
}

pub fn grey_level(v: f64, shade: Shade) -> u8 {
    let t = match shade {
        Shade::Signed => (v + 1.0) / 2.0,
        Shade::Unit => v,
    };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P5 image, one pixel per cell, row 0 at the top.
pub fn pgm_bytes(rows: usize, cols: usize, values: &[f64], shade: Shade) -> Result<Vec<u8>> {
    if rows * cols != values.len() || rows == 0 {
        return Err(Error::shape("pgm export", &[values.len()], &[rows, cols]));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| grey_level(v, shade)));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f64], shade: Shade) -> Result<()> {
    fs::write(path, pgm_bytes(rows, cols, values, shade)?)?;
    Ok(())
}
