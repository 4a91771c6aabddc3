use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced one of the scores to 0.
    pub undefined: bool,
}

/// `2pr / (p + r)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class scores from a confusion matrix indexed `[truth][prediction]`.
pub fn per_class_metrics(confusion: &[Vec<u64>]) -> Vec<ClassMetrics> {
    let c = confusion.len();
    (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
            let mut undefined = false;
            let mut ratio = |num: u64, den: u64| {
                if den == 0 {
                    undefined = true;
                    0.0
                } else {
                    num as f64 / den as f64
                }
            };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: k,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
                undefined,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    /// Best classes first.
    Descending,
    Ascending,
}

impl std::str::FromStr for SortOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desc" | "descending" => Ok(SortOrder::Descending),
            "asc" | "ascending" => Ok(SortOrder::Ascending),
            other => Err(Error::Config(format!("unknown sort order `{other}` (expected desc or asc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub total: u64,
    /// `[truth][prediction]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize], mean_loss: f64) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::invalid(format!("class index out of range for {classes} classes")));
            }
            confusion[t][p] += 1;
        }
        let total = truth.len() as u64;
        let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
        Ok(EvalReport {
            accuracy: trace as f64 / total as f64,
            mean_loss,
            total,
            per_class: per_class_metrics(&confusion),
            confusion,
        })
    }

    /// Classes with at least one true or predicted sample, ordered by F1.
    /// Descending breaks ties by class index; ascending is its exact reverse.
    pub fn ranked(&self, order: SortOrder) -> Vec<&ClassMetrics> {
        let mut rows: Vec<&ClassMetrics> = self
            .per_class
            .iter()
            .filter(|m| m.support > 0 || self.confusion.iter().any(|r| r[m.class] > 0))
            .collect();
        rows.sort_by(|a, b| b.f1.total_cmp(&a.f1).then(a.class.cmp(&b.class)));
        if order == SortOrder::Ascending {
            rows.reverse();
        }
        rows
    }

    /// Tab-separated table: a summary header, then one row per class with
    /// class, precision, recall, F1 and support.
    pub fn to_table(&self, order: SortOrder) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# accuracy\t{:.6}", self.accuracy);
        let _ = writeln!(out, "# mean_loss\t{:.6}", self.mean_loss);
        let _ = writeln!(out, "# samples\t{}", self.total);
        out.push_str("class\tprecision\trecall\tf1-score\tsupport\n");
        for m in self.ranked(order) {
            let flag = if m.undefined { "\t*" } else { "" };
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}{flag}",
                m.class, m.precision, m.recall, m.f1, m.support
            );
        }
        out
    }
}
