//! Accuracy matrix and the metrics derived from it.
//!
//! `A[i][t]` (both 1-based) is the accuracy of the model after step `t` on
//! the test samples of the classes introduced at step `i`, for `i <= t`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ExpandingModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    steps: usize,
    /// Row-major `steps x steps`; `None` in the upper triangle and for
    /// entries not yet recorded.
    entries: Vec<Option<f64>>,
}

/// Overall accuracy, forgetting and the two ablation views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub fgt: f64,
    pub acc_new: f64,
    pub acc_old: f64,
}

impl AccuracyMatrix {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Contract(
                "an accuracy matrix needs at least one step".into(),
            ));
        }
        Ok(AccuracyMatrix {
            steps,
            entries: vec![None; steps * steps],
        })
    }

    /// Builds a complete matrix from rows `rows[i-1][t-1]`; only the lower
    /// triangle (`t >= i`) is read.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len())?;
        for (i, row) in rows.iter().enumerate() {
            for t in i..rows.len() {
                let v = *row.get(t).ok_or_else(|| {
                    Error::Contract(format!("row {} is missing step {}", i + 1, t + 1))
                })?;
                m.set(i + 1, t + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        if i == 0 || t == 0 || i > t || t > self.steps {
            return None;
        }
        self.entries[(i - 1) * self.steps + (t - 1)]
    }

    pub fn set(&mut self, i: usize, t: usize, value: f64) -> Result<()> {
        if i == 0 || i > t || t > self.steps {
            return Err(Error::Contract(format!(
                "A[{i}][{t}] lies outside the lower triangle of a {} step matrix",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!(
                "accuracy {value} is outside [0, 1]"
            )));
        }
        self.entries[(i - 1) * self.steps + (t - 1)] = Some(value);
        Ok(())
    }

    /// Steps whose full column has been recorded.
    pub fn completed_steps(&self) -> usize {
        (1..=self.steps)
            .take_while(|&t| (1..=t).all(|i| self.get(i, t).is_some()))
            .count()
    }

    pub fn is_complete(&self) -> bool {
        self.completed_steps() == self.steps
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "accuracy matrix is complete through step {} of {}",
                self.completed_steps(),
                self.steps
            )))
        }
    }

    fn a(&self, i: usize, t: usize) -> f64 {
        self.get(i, t).expect("checked complete")
    }

    /// Evaluates `model` (trained through step `t`) on the test samples of
    /// each group `1..=t` and fills column `t`.
    pub fn record(
        &mut self,
        t: usize,
        model: &ExpandingModel,
        group_tests: &[Dataset],
    ) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Contract(format!(
                "step {t} is outside 1..={}",
                self.steps
            )));
        }
        if group_tests.len() < t {
            return Err(Error::Contract(format!(
                "test sets cover {} groups but step {t} needs {t}",
                group_tests.len()
            )));
        }
        for (i, test) in group_tests.iter().take(t).enumerate() {
            if test.is_empty() {
                return Err(Error::Contract(format!(
                    "group {} has no test samples",
                    i + 1
                )));
            }
            let pred = model.predict(test.features.view())?;
            let hits = pred
                .iter()
                .zip(&test.labels)
                .filter(|(p, y)| p == y)
                .count();
            self.set(i + 1, t, hits as f64 / test.len() as f64)?;
        }
        Ok(())
    }

    /// `(1/T) Σ_t (1/t) Σ_{i<=t} A[i][t]`.
    pub fn overall_acc(&self) -> Result<f64> {
        self.require_complete()?;
        let total: f64 = (1..=self.steps)
            .map(|t| (1..=t).map(|i| self.a(i, t)).sum::<f64>() / t as f64)
            .sum();
        Ok(total / self.steps as f64)
    }

    /// `(1/T) Σ_t (1/(t-1)) Σ_{i<t} max_{i<=j<t} (A[i][j] - A[i][t])`, with
    /// the `t = 1` term taken as 0.
    pub fn forgetting(&self) -> Result<f64> {
        self.require_complete()?;
        let mut total = 0.0;
        for t in 2..=self.steps {
            let mut term = 0.0;
            for i in 1..t {
                let now = self.a(i, t);
                term += (i..t)
                    .map(|j| self.a(i, j) - now)
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            total += term / (t - 1) as f64;
        }
        Ok(total / self.steps as f64)
    }

    /// Mean of the diagonal and mean of the first row.
    pub fn acc_new_old(&self) -> Result<(f64, f64)> {
        self.require_complete()?;
        let t = self.steps as f64;
        let new = (1..=self.steps).map(|s| self.a(s, s)).sum::<f64>() / t;
        let old = (1..=self.steps).map(|s| self.a(1, s)).sum::<f64>() / t;
        Ok((new, old))
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let (acc_new, acc_old) = self.acc_new_old()?;
        Ok(Metrics {
            acc: self.overall_acc()?,
            fgt: self.forgetting()?,
            acc_new,
            acc_old,
        })
    }

    /// Per-step curves: average accuracy over seen groups and the
    /// forgetting term of each step.
    pub fn curves(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.require_complete()?;
        let acc = (1..=self.steps)
            .map(|t| (1..=t).map(|i| self.a(i, t)).sum::<f64>() / t as f64)
            .collect();
        let fgt = (1..=self.steps)
            .map(|t| {
                if t == 1 {
                    return 0.0;
                }
                (1..t)
                    .map(|i| {
                        (i..t)
                            .map(|j| self.a(i, j) - self.a(i, t))
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum::<f64>()
                    / (t - 1) as f64
            })
            .collect();
        Ok((acc, fgt))
    }

    /// CSV with a header `group,step_1..step_T`; upper-triangle cells empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string()];
        header.extend((1..=self.steps).map(|t| format!("step_{t}")));
        w.write_record(&header).expect("in-memory write");
        for i in 1..=self.steps {
            let mut row = vec![i.to_string()];
            row.extend((1..=self.steps).map(|t| match self.get(i, t) {
                Some(v) => v.to_string(),
                None => String::new(),
            }));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let steps = r
            .headers()
            .map_err(|e| Error::Contract(format!("accuracy table header: {e}")))?
            .len()
            .saturating_sub(1);
        let mut m = AccuracyMatrix::new(steps)?;
        for (row_idx, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Contract(format!("accuracy table: {e}")))?;
            for (t, cell) in rec.iter().skip(1).enumerate() {
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad accuracy cell '{cell}'")))?;
                m.set(row_idx + 1, t + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
