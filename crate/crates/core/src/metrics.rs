//! Continual-learning summaries over a lower-triangular result table.
//!
//! `table[j][k]` is the metric on dataset `j` after training through dataset
//! `k`, present exactly when `j ≤ k`.

use crate::error::{Error, Result};

pub type Table = Vec<Vec<Option<f64>>>;

/// Checks lower-triangular completeness and returns the number of datasets.
pub fn check_complete(table: &Table) -> Result<usize> {
    let t = table.len();
    if t == 0 {
        return Err(Error::domain("continual log", "no datasets"));
    }
    for (j, row) in table.iter().enumerate() {
        if row.len() != t {
            return Err(Error::domain("continual log", format!("row {j} has {} entries, expected {t}", row.len())));
        }
        for (k, cell) in row.iter().enumerate() {
            match (j <= k, cell) {
                (true, None) => {
                    return Err(Error::domain("continual log", format!("missing entry for dataset {} after stage {}", j + 1, k + 1)))
                }
                (false, Some(_)) => {
                    return Err(Error::domain("continual log", format!("entry for dataset {} before it was trained", j + 1)))
                }
                _ => {}
            }
        }
    }
    Ok(t)
}

fn at(table: &Table, j: usize, k: usize) -> f64 {
    table[j][k].expect("checked complete")
}

/// Mean relative degradation of earlier datasets, in percent.
pub fn average_forgetting(table: &Table) -> Result<f64> {
    let t = check_complete(table)?;
    if t < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for k in 1..t {
        for j in 0..k {
            let base = at(table, j, j);
            if base == 0.0 {
                return Err(Error::Numeric(format!("dataset {} has a zero first-exposure metric", j + 1)));
            }
            sum += (at(table, j, k) - base) / base;
        }
    }
    Ok(100.0 * 2.0 * sum / (t * (t - 1)) as f64)
}

/// Mean over every filled entry.
pub fn average_performance(table: &Table) -> Result<f64> {
    let t = check_complete(table)?;
    let mut sum = 0.0;
    for k in 0..t {
        for j in 0..=k {
            sum += at(table, j, k);
        }
    }
    Ok(2.0 * sum / (t * (t + 1)) as f64)
}

/// Harmonic mean of final performance and first-exposure performance sums.
pub fn spto(table: &Table) -> Result<f64> {
    let t = check_complete(table)?;
    let s: f64 = (0..t).map(|k| at(table, k, t - 1)).sum();
    let p: f64 = (0..t).map(|k| at(table, k, k)).sum();
    if s + p == 0.0 {
        return Err(Error::Numeric("stability and plasticity sums are both zero".into()));
    }
    Ok(2.0 * s * p / (s + p))
}
