//! Accuracy matrix, ACC and BWT.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular `R`, where `R[i][j]` is the accuracy on task `j`'s test
/// split after training on task `i` (both 0-based here, `j <= i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    pub fn from_rows(num_tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(num_tasks);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i >= self.num_tasks {
            return Err(Error::contract(format!(
                "matrix already has all {} rows",
                self.num_tasks
            )));
        }
        if row.len() != i + 1 {
            return Err(Error::contract(format!(
                "row {} must have {} entries, got {}",
                i + 1,
                i + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    fn last_row(&self) -> Result<&[f64]> {
        if !self.is_complete() || self.num_tasks == 0 {
            return Err(Error::contract(format!(
                "final row undefined: {} of {} rows recorded",
                self.rows.len(),
                self.num_tasks
            )));
        }
        Ok(&self.rows[self.num_tasks - 1])
    }

    /// CSV with one line per finished task and blank undefined cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for j in 1..=self.num_tasks {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for j in 0..self.num_tasks {
                out.push(',');
                if let Some(v) = row.get(j) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of the final row: task-balanced average accuracy.
pub fn acc(matrix: &AccuracyMatrix) -> Result<f64> {
    let last = matrix.last_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Final-row accuracies weighted by each task's test support.
pub fn acc_sample_weighted(matrix: &AccuracyMatrix, support: &[usize]) -> Result<f64> {
    let last = matrix.last_row()?;
    if support.len() != last.len() {
        return Err(Error::contract("support length must equal the number of tasks"));
    }
    let total: usize = support.iter().sum();
    if total == 0 {
        return Err(Error::contract("zero total support"));
    }
    Ok(last.iter().zip(support).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64)
}

/// Backward transfer: mean over earlier tasks of `R[T][i] - R[i][i]`.
pub fn bwt(matrix: &AccuracyMatrix) -> Result<f64> {
    let t = matrix.num_tasks;
    if t < 2 {
        return Err(Error::contract("BWT needs at least two tasks"));
    }
    let last = matrix.last_row()?;
    let total: f64 = (0..t - 1).map(|i| last[i] - matrix.rows[i][i]).sum();
    Ok(total / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Only classes present in `labels` appear.
    pub per_class: BTreeMap<usize, f64>,
    pub support: BTreeMap<usize, usize>,
    pub overall: f64,
}

pub fn per_class_accuracy(predictions: &[usize], labels: &[usize]) -> Result<ClassAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    let mut support: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        *support.entry(y).or_insert(0) += 1;
        *hits.entry(y).or_insert(0) += usize::from(p == y);
    }
    let per_class = support.iter().map(|(c, &n)| (*c, hits[c] as f64 / n as f64)).collect();
    let correct: usize = hits.values().sum();
    let overall = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok(ClassAccuracy {
        per_class,
        support,
        overall,
    })
}
