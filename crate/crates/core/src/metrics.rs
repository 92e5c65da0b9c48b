//! Confusion matrices and per-class classification reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};

/// `counts[t * k + p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_pairs(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape("confusion", &[labels.len()], &[predictions.len()]));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in labels.iter().zip(predictions) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::invalid(
                "confusion",
                format!("class pair ({truth}, {predicted}) outside [0, {})", self.k),
            ));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Row sum: number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    /// Column sum: number of samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }
}

/// Labels-vs-predictions confusion over the ten classes.
pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_pairs(labels, predictions, ClassLabel::COUNT)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No predictions of this class: precision reported as 0.
    pub precision_undefined: bool,
    /// No samples of this class: recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub rows: Vec<ReportRow>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total_support: u64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn class_name(k: usize, c: usize) -> String {
    match ClassLabel::from_index(c) {
        Some(l) if k == ClassLabel::COUNT => l.name().to_string(),
        _ => format!("class {c}"),
    }
}

fn summarize(rows: Vec<ReportRow>, accuracy: f64) -> ClassificationReport {
    let supported: Vec<&ReportRow> = rows.iter().filter(|r| r.support > 0).collect();
    let n = supported.len() as f64;
    let macro_avg = Averages {
        precision: supported.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: supported.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: supported.iter().map(|r| r.f1).sum::<f64>() / n,
    };
    let total: u64 = rows.iter().map(|r| r.support).sum();
    let w = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r) * r.support as f64).sum::<f64>() / total as f64;
    let weighted_avg = Averages {
        precision: w(|r| r.precision),
        recall: w(|r| r.recall),
        f1: w(|r| r.f1),
    };
    ClassificationReport {
        accuracy,
        balanced_accuracy: macro_avg.recall,
        macro_avg,
        weighted_avg,
        total_support: total,
        rows,
    }
}

/// Per-class and aggregate statistics of `cm`.
pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("report", "confusion matrix is empty"));
    }
    let k = cm.classes();
    let rows = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let (pred, support) = (cm.predicted(c), cm.support(c));
            let precision = if pred > 0 { tp / pred as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            ReportRow {
                class: class_name(k, c),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
                precision_undefined: pred == 0,
                recall_undefined: support == 0,
            }
        })
        .collect();
    Ok(summarize(rows, cm.trace() as f64 / total as f64))
}

/// Mean recall over classes with nonzero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(report(cm)?.balanced_accuracy)
}

/// Builds a report from reported per-class `(precision, recall, support)`
/// triples; F1 and all aggregates are recomputed. Accuracy is the
/// support-weighted recall, since `TP = recall * support`.
pub fn from_class_stats(stats: &[(f64, f64, u64)]) -> Result<ClassificationReport> {
    if stats.iter().all(|s| s.2 == 0) {
        return Err(Error::invalid("from_class_stats", "total support is zero"));
    }
    let k = stats.len();
    let rows: Vec<ReportRow> = stats
        .iter()
        .enumerate()
        .map(|(c, &(precision, recall, support))| ReportRow {
            class: class_name(k, c),
            precision,
            recall,
            f1: f1_score(precision, recall),
            support,
            precision_undefined: false,
            recall_undefined: support == 0,
        })
        .collect();
    let total: u64 = stats.iter().map(|s| s.2).sum();
    let accuracy = stats.iter().map(|s| s.1 * s.2 as f64).sum::<f64>() / total as f64;
    Ok(summarize(rows, accuracy))
}

/// Rounds half away from zero to `places` decimals and formats the result.
pub fn round_half_away(v: f64, places: u32) -> String {
    let scale = 10f64.powi(places as i32);
    // nudge by a few ulps so values printed exactly at .xxx5 round outward
    let scaled = v * scale;
    let r = (scaled.abs() * (1.0 + 4.0 * f64::EPSILON)).round().copysign(scaled) / scale;
    format!("{r:.prec$}", prec = places as usize)
}

impl ClassificationReport {
    /// Fixed-width table: one row per class, then accuracy, balanced
    /// accuracy, macro and weighted averages. Three decimals.
    pub fn to_text(&self) -> String {
        let f = |v: f64| round_half_away(v, 3);
        let width = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(0).max(17);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}", "Class", "Precision", "Recall", "F1-Score", "Support");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}",
                r.class,
                f(r.precision),
                f(r.recall),
                f(r.f1),
                r.support
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>9}", "Accuracy", f(self.accuracy));
        let _ = writeln!(s, "{:<width$}  {:>9}", "Balanced Accuracy", f(self.balanced_accuracy));
        for (name, a) in [("Macro Avg", &self.macro_avg), ("Weighted Avg", &self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}",
                name,
                f(a.precision),
                f(a.recall),
                f(a.f1),
                self.total_support
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
