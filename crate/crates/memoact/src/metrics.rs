//! Line-delimited JSON metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use memoact_core::trainer::MetricsRow;
use serde::{Deserialize, Serialize};

use crate::FormatError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub variant: String,
    pub task: String,
    pub seed: u64,
    /// Absent for evaluation-only rows.
    pub loss_mean: Option<f64>,
    pub success_rate: Option<f64>,
    pub subtask_rates: Vec<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub fn from_row(row: &MetricsRow, seed: u64) -> Self {
        Self {
            epoch: row.epoch,
            variant: row.variant.clone(),
            task: row.task.clone(),
            seed,
            loss_mean: Some(row.loss_mean),
            success_rate: row.success_rate,
            subtask_rates: row.subtask_rates.clone(),
            wall_clock_s: row.wall_clock_s,
        }
    }

    /// Equality on every field except wall-clock time, compared bitwise.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.epoch == other.epoch
            && self.variant == other.variant
            && self.task == other.task
            && self.seed == other.seed
            && self.loss_mean.map(f64::to_bits) == other.loss_mean.map(f64::to_bits)
            && self.success_rate.map(f64::to_bits) == other.success_rate.map(f64::to_bits)
            && bits(&self.subtask_rates) == bits(&other.subtask_rates)
    }
}

/// Appends one JSON object per line, flushing after each.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self, FormatError> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn create(path: &Path) -> Result<Self, FormatError> {
        Ok(Self {
            file: File::create(path)?,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<(), FormatError> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, FormatError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
