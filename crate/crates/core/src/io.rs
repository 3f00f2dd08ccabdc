//! CSV artifacts: phase stacks, complex matrices and result tables.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::wave::{FitLoss, PhaseStack};

fn format_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PhaseRow {
    layer: usize,
    atom: usize,
    phase_rad: f64,
}

/// Writes one row per meta-atom: `layer,atom,phase_rad`, both indices 1-based.
pub fn write_stack_csv(path: &Path, stack: &PhaseStack) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (l, layer) in stack.layers().iter().enumerate() {
        for (m, &phase) in layer.iter().enumerate() {
            w.serialize(PhaseRow {
                layer: l + 1,
                atom: m + 1,
                phase_rad: phase,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_stack_csv(path: &Path) -> Result<PhaseStack> {
    let mut r = csv::Reader::from_path(path)?;
    let mut layers: Vec<Vec<f64>> = Vec::new();
    for (i, row) in r.deserialize::<PhaseRow>().enumerate() {
        let row = row.map_err(|e| format_err(path, e))?;
        if row.layer == 0 || row.layer > layers.len() + 1 {
            return Err(format_err(path, format!("row {}: layer {} out of order", i + 1, row.layer)));
        }
        if row.layer == layers.len() + 1 {
            layers.push(Vec::new());
        }
        let layer = &mut layers[row.layer - 1];
        if row.atom != layer.len() + 1 {
            return Err(format_err(path, format!("row {}: atom {} out of order", i + 1, row.atom)));
        }
        layer.push(row.phase_rad);
    }
    PhaseStack::new(layers).map_err(|e| format_err(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRow {
    row: usize,
    col: usize,
    re: f64,
    im: f64,
}

/// Writes a complex matrix as `row,col,re,im` with 1-based indices.
pub fn write_matrix_csv(path: &Path, m: ArrayView2<Complex64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for ((i, j), z) in m.indexed_iter() {
        w.serialize(EntryRow {
            row: i + 1,
            col: j + 1,
            re: z.re,
            im: z.im,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<Complex64>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<EntryRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_err(path, e))?;
    let nr = rows.iter().map(|e| e.row).max().unwrap_or(0);
    let nc = rows.iter().map(|e| e.col).max().unwrap_or(0);
    if rows.len() != nr * nc || rows.iter().any(|e| e.row == 0 || e.col == 0) {
        return Err(format_err(path, format!("expected a dense {nr}x{nc} matrix, found {} entries", rows.len())));
    }
    let mut m = Array2::from_elem((nr, nc), Complex64::new(f64::NAN, f64::NAN));
    for e in rows {
        let slot = &mut m[[e.row - 1, e.col - 1]];
        if !slot.re.is_nan() {
            return Err(format_err(path, format!("duplicate entry ({}, {})", e.row, e.col)));
        }
        *slot = Complex64::new(e.re, e.im);
    }
    Ok(m)
}

/// Writes serializable records as a CSV table with a header row.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    iteration: usize,
    loss: f64,
    normalized_db: f64,
}

/// Loss history, iteration 0 being the initial stack.
pub fn write_history_csv(path: &Path, history: &[FitLoss]) -> Result<()> {
    let rows: Vec<HistoryRow> = history
        .iter()
        .enumerate()
        .map(|(i, l)| HistoryRow {
            iteration: i,
            loss: l.value,
            normalized_db: l.db,
        })
        .collect();
    write_table(path, &rows)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
