//! Accuracy matrix and the metrics derived from it.

use serde::{Deserialize, Serialize};

use crate::dataset::TaskId;
use crate::error::{Error, Result};

/// Lower-triangular matrix: row `i` holds the accuracy on tasks `0..=i`
/// after training through task `i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Metric(format!(
                "row {} must have {expected} entries, got {}",
                self.rows.len(),
                row.len()
            )));
        }
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Metric(format!("accuracy {x} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed stages.
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows.get(i).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

fn check_stage(m: &AccuracyMatrix, stage: usize) -> Result<()> {
    if stage == 0 || stage > m.stages() {
        return Err(Error::Metric(format!(
            "stage {stage} not available, matrix has {} rows",
            m.stages()
        )));
    }
    Ok(())
}

/// Mean of row `stage` (1-based: the number of tasks trained so far).
pub fn avg_accuracy(m: &AccuracyMatrix, stage: usize) -> Result<f64> {
    check_stage(m, stage)?;
    let row = &m.rows[stage - 1];
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Average over earlier tasks of the drop from their best past accuracy to
/// the accuracy at `stage` (1-based, at least 2).
pub fn avg_forgetting(m: &AccuracyMatrix, stage: usize) -> Result<f64> {
    check_stage(m, stage)?;
    if stage < 2 {
        return Err(Error::Metric("forgetting needs at least two stages".into()));
    }
    let k = stage - 1;
    let mut total = 0.0;
    for j in 0..k {
        let peak = (j..k).map(|i| m.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
        total += peak - m.rows[k][j];
    }
    Ok(total / k as f64)
}

/// Fraction of samples whose predicted task matches the true one.
pub fn task_identify_accuracy(predicted: &[TaskId], truth: &[TaskId]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Metric("no predictions".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}
