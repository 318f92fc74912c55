//! Confusion matrix, overall accuracy and per-class F1.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// `counts[reference][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidArgument(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, k)).sum()
    }

    /// Adds one count per pixel whose reference label is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, reference: &LabelMap, ignore: Option<u8>) -> Result<()> {
        if (pred.height(), pred.width()) != (reference.height(), reference.width()) {
            return Err(Error::InvalidArgument(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.height(),
                pred.width(),
                reference.height(),
                reference.width()
            )));
        }
        let k = self.classes;
        let pairs = || {
            pred.data()
                .iter()
                .zip(reference.data())
                .enumerate()
                .filter(|(_, (_, &r))| Some(r) != ignore)
        };
        // Validate first so a failed call leaves the counts untouched.
        if let Some((i, (p, r))) = pairs().find(|(_, (&p, &r))| r as usize >= k || p as usize >= k) {
            let (y, x) = (i / pred.width(), i % pred.width());
            return Err(Error::InvalidArgument(format!(
                "label out of range at ({y}, {x}): reference {r}, predicted {p}, classes {k}"
            )));
        }
        for (_, (&p, &r)) in pairs() {
            self.counts[r as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; order of merging does not matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument(format!(
                "merging {0}x{0} with {1}x{1}",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("overall accuracy of an empty matrix".into()));
        }
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class F1 and the unweighted mean over classes present in the
    /// reference, leaving out `exclude`.
    pub fn f1_scores_excluding(&self, exclude: &[usize]) -> Result<F1Scores> {
        if self.total() == 0 {
            return Err(Error::InvalidArgument("F1 of an empty matrix".into()));
        }
        let mut per_class = Vec::with_capacity(self.classes);
        let mut included = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let tp = self.get(k, k) as f64;
            let (row, col) = (self.row_sum(k) as f64, self.col_sum(k) as f64);
            let precision = if col > 0.0 { tp / col } else { 0.0 };
            let recall = if row > 0.0 { tp / row } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(f1);
            included.push(row > 0.0 && !exclude.contains(&k));
        }
        let used: Vec<f64> = per_class
            .iter()
            .zip(&included)
            .filter(|(_, &inc)| inc)
            .map(|(f, _)| *f)
            .collect();
        let mean = if used.is_empty() {
            0.0
        } else {
            used.iter().sum::<f64>() / used.len() as f64
        };
        Ok(F1Scores {
            per_class,
            included,
            mean,
        })
    }

    pub fn f1_scores(&self) -> Result<F1Scores> {
        self.f1_scores_excluding(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    /// Whether each class entered the mean.
    pub included: Vec<bool>,
    pub mean: f64,
}

/// Evaluation summary in the per-class F1 / mean F1 / OA layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub f1: F1Scores,
    pub overall_accuracy: f64,
}

impl MetricsReport {
    pub fn from_matrix(cm: &ConfusionMatrix, class_names: &[&str], exclude: &[usize]) -> Result<Self> {
        if class_names.len() != cm.classes() {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes()
            )));
        }
        Ok(MetricsReport {
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            f1: cm.f1_scores_excluding(exclude)?,
            overall_accuracy: cm.overall_accuracy()?,
        })
    }

    /// Aligned text table, values in percent.
    pub fn table(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(16);
        let mut s = format!("{:<width$}  {:>8}\n", "class", "F1 (%)");
        for (i, name) in self.class_names.iter().enumerate() {
            let mark = if self.f1.included[i] { "" } else { " *" };
            let _ = writeln!(s, "{name:<width$}  {:>8.2}{mark}", 100.0 * self.f1.per_class[i]);
        }
        let _ = writeln!(s, "{:<width$}  {:>8.2}", "mean_f1", 100.0 * self.f1.mean);
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2}",
            "overall_accuracy",
            100.0 * self.overall_accuracy
        );
        s
    }

    /// `class,F1` rows, then `mean_f1` and `overall_accuracy`, as fractions.
    pub fn csv(&self) -> String {
        let mut s = String::from("class,f1\n");
        for (name, f) in self.class_names.iter().zip(&self.f1.per_class) {
            let _ = writeln!(s, "{name},{f:.6}");
        }
        let _ = writeln!(s, "mean_f1,{:.6}", self.f1.mean);
        let _ = writeln!(s, "overall_accuracy,{:.6}", self.overall_accuracy);
        s
    }
}
