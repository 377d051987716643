//! Confusion matrices, per-class precision/recall/F1, one-vs-rest AUC-ROC and
//! the serialized evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×K count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion", "matrix rows must all have K entries"));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.trace() as f64 / total as f64,
        }
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![truth.len()],
            rhs: vec![predicted.len()],
        });
    }
    let mut matrix = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        matrix.add(t, p);
    }
    Ok(matrix)
}

/// Precision, recall and F1 of one class. A zero denominator yields 0 and
/// sets the matching flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No sample was predicted as this class.
    pub precision_undefined: bool,
    /// No sample of this class was evaluated.
    pub recall_undefined: bool,
}

impl ClassPrf {
    pub fn is_degenerate(&self) -> bool {
        self.precision_undefined || self.recall_undefined
    }
}

pub fn per_class_prf(matrix: &ConfusionMatrix) -> Vec<ClassPrf> {
    (0..matrix.classes())
        .map(|c| {
            let tp = matrix.get(c, c);
            let predicted = matrix.col_sum(c);
            let support = matrix.row_sum(c);
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassPrf {
                precision,
                recall,
                f1,
                support,
                precision_undefined: predicted == 0,
                recall_undefined: support == 0,
            }
        })
        .collect()
}

/// Binary AUC by the Mann–Whitney rank statistic with tied scores sharing
/// their average rank. `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&s| positive[s]).count();
        rank_sum_pos += mean_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC of every class from N×K row-major probabilities. Classes
/// absent from `truth` (or covering every sample) report `None`.
pub fn auc_roc_ovr(scores: &[f64], classes: usize, truth: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.len() != truth.len() * classes {
        return Err(Error::ShapeMismatch {
            op: "auc_roc_ovr",
            lhs: vec![truth.len(), classes],
            rhs: vec![scores.len()],
        });
    }
    if let Some(&label) = truth.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok((0..classes)
        .map(|c| {
            let column: Vec<f64> = scores.chunks(classes).map(|row| row[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&column, &positive)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: Option<f64>,
    pub support: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Everything an evaluation produces. Values keep full precision; the text
/// rendering rounds to four decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassReport>,
    pub total: u64,
    pub accuracy: f64,
    /// Means over classes with both denominators non-zero.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean over classes with a defined AUC.
    pub macro_auc_roc: Option<f64>,
}

pub fn summarize(
    matrix: &ConfusionMatrix,
    aucs: &[Option<f64>],
    labels: &[String],
) -> Result<MetricsReport> {
    let k = matrix.classes();
    if aucs.len() != k || labels.len() != k {
        return Err(Error::ShapeMismatch {
            op: "summarize",
            lhs: vec![k],
            rhs: vec![aucs.len(), labels.len()],
        });
    }
    let prf = per_class_prf(matrix);
    let classes: Vec<ClassReport> = prf
        .iter()
        .zip(aucs)
        .zip(labels)
        .map(|((m, auc), label)| ClassReport {
            label: label.clone(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc_roc: *auc,
            support: m.support,
            precision_undefined: m.precision_undefined,
            recall_undefined: m.recall_undefined,
        })
        .collect();
    let defined: Vec<&ClassPrf> = prf.iter().filter(|m| !m.is_degenerate()).collect();
    let mean = |f: fn(&ClassPrf) -> f64| {
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().map(|m| f(m)).sum::<f64>() / defined.len() as f64
        }
    };
    let defined_aucs: Vec<f64> = aucs.iter().flatten().copied().collect();
    Ok(MetricsReport {
        labels: labels.to_vec(),
        confusion: matrix.clone(),
        total: matrix.total(),
        accuracy: matrix.accuracy(),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        macro_auc_roc: (!defined_aucs.is_empty())
            .then(|| defined_aucs.iter().sum::<f64>() / defined_aucs.len() as f64),
        classes,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// Aligned per-class table followed by the confusion matrix.
    pub fn to_table(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>7}",
            "class", "precision", "recall", "f1", "auc_roc", "support"
        );
        for c in &self.classes {
            let flag = if c.precision_undefined || c.recall_undefined {
                "  *"
            } else {
                ""
            };
            let auc = c
                .auc_roc
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}  {:>7}{flag}",
                c.label, c.precision, c.recall, c.f1, auc, c.support
            );
        }
        let macro_auc = self
            .macro_auc_roc
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}  {:>7}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1, macro_auc, self.total
        );
        let _ = writeln!(out, "\naccuracy {:.4} ({} samples)", self.accuracy, self.total);
        if self.classes.iter().any(|c| c.precision_undefined || c.recall_undefined) {
            let _ = writeln!(out, "* zero denominator; value reported as 0");
        }
        let _ = writeln!(out, "\nconfusion (rows true, columns predicted)");
        let cell = self
            .confusion
            .rows()
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        for (label, row) in self.labels.iter().zip(self.confusion.rows()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>cell$}")).collect();
            let _ = writeln!(out, "{label:<width$}  {}", cells.join(" "));
        }
        out
    }

    /// Writes `metrics.json` and `metrics.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.json", self.to_json()), ("metrics.txt", self.to_table())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_confusion() {
        let m = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.rows(), vec![vec![1, 1], vec![0, 1]]);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(matches!(
            confusion(&[2], &[0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0, 1, 2, 2, 1, 0, 0];
        let m = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(m.get(t, p) > 0, t == p);
            }
        }
        for c in per_class_prf(&m) {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn degenerate_class_is_flagged() {
        let m = ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![1, 0, 0], vec![0, 0, 0]]).unwrap();
        let prf = per_class_prf(&m);
        assert!(prf[1].precision_undefined && !prf[1].recall_undefined);
        assert_eq!(prf[1].precision, 0.0);
        assert!(prf[2].precision_undefined && prf[2].recall_undefined);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.6], &[false, false]), None);
    }

    #[test]
    fn missing_class_has_no_auc() {
        let scores = [0.7, 0.2, 0.1, 0.1, 0.8, 0.1];
        let aucs = auc_roc_ovr(&scores, 3, &[0, 1]).unwrap();
        assert_eq!(aucs[0], Some(1.0));
        assert_eq!(aucs[2], None);
    }

    #[test]
    fn perfect_report() {
        let m = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let report = summarize(&m, &[Some(1.0); 3], &labels).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.macro_auc_roc, Some(1.0));
        assert!(report.to_table().contains("accuracy 1.0000"));
    }
}
