//! Multi-label evaluation metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How scores become label assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each image receives its `k` highest-scoring labels.
    TopK(usize),
    /// A label is assigned when its score is positive.
    Threshold,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::TopK(5)
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::TopK(k) => write!(f, "top{k}"),
            Protocol::Threshold => f.write_str("threshold"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the label has no positive image.
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean per-class precision over contributing classes.
    pub precision: f64,
    /// Mean per-class recall over contributing classes.
    pub recall: f64,
    /// `2·P·R/(P+R)` of the mean precision and recall.
    pub cf1: f64,
    /// Mean of the per-class F1 values.
    pub mean_class_f1: f64,
    /// Micro-averaged F1 over all assignments.
    pub of1: f64,
    pub overall_precision: f64,
    pub overall_recall: f64,
    pub map: f64,
    /// Classes predicted or present at least once.
    pub contributing: usize,
}

/// `2pr/(p+r)` with `0/0 → 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Boolean assignments under a protocol. Top-k ties are broken toward the
/// lower label index.
pub fn assign(scores: &Array2<f64>, protocol: Protocol) -> Array2<bool> {
    let (n, l) = scores.dim();
    let mut out = Array2::from_elem((n, l), false);
    match protocol {
        Protocol::Threshold => {
            for ((i, j), &s) in scores.indexed_iter() {
                out[[i, j]] = s > 0.0;
            }
        }
        Protocol::TopK(k) => {
            for i in 0..n {
                let mut idx: Vec<usize> = (0..l).collect();
                idx.sort_by(|&a, &b| scores[[i, b]].total_cmp(&scores[[i, a]]).then(a.cmp(&b)));
                for &j in idx.iter().take(k) {
                    out[[i, j]] = true;
                }
            }
        }
    }
    out
}

/// Average precision of a ranking; tied scores are evaluated as one block
/// so the result does not depend on image order. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let mut block_tp = 0;
        while i < idx.len() && scores[idx[i]] == s {
            block_tp += positive[idx[i]] as usize;
            seen += 1;
            i += 1;
        }
        tp += block_tp;
        ap += block_tp as f64 / total as f64 * (tp as f64 / seen as f64);
    }
    Some(ap)
}

/// Metrics of `scores` (`N × L`) against `truth` (±1).
pub fn evaluate_scores(scores: &Array2<f64>, truth: &Array2<f64>, protocol: Protocol) -> Result<MetricsReport> {
    if scores.dim() != truth.dim() {
        return Err(Error::Shape {
            op: "evaluate_scores",
            lhs: scores.dim(),
            rhs: truth.dim(),
        });
    }
    if let Protocol::TopK(0) = protocol {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let assigned = assign(scores, protocol);
    let l = scores.ncols();
    let mut per_class = Vec::with_capacity(l);
    let (mut all_tp, mut all_pred, mut all_support) = (0, 0, 0);
    for j in 0..l {
        let col_truth: Vec<bool> = truth.column(j).iter().map(|&t| t > 0.0).collect();
        let col_pred = assigned.column(j);
        let support = col_truth.iter().filter(|&&t| t).count();
        let predicted = col_pred.iter().filter(|&&p| p).count();
        let tp = col_truth.iter().zip(col_pred.iter()).filter(|(&t, &p)| t && p).count();
        all_tp += tp;
        all_pred += predicted;
        all_support += support;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let col_scores: Vec<f64> = scores.column(j).to_vec();
        per_class.push(ClassMetrics {
            label: j,
            support,
            predicted,
            true_positives: tp,
            precision,
            recall,
            f1: f1(precision, recall),
            average_precision: average_precision(&col_scores, &col_truth),
        });
    }
    let contributing: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0 || c.predicted > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if contributing.is_empty() {
            0.0
        } else {
            contributing.iter().map(|c| f(c)).sum::<f64>() / contributing.len() as f64
        }
    };
    let precision = mean(|c| c.precision);
    let recall = mean(|c| c.recall);
    let mean_class_f1 = mean(|c| c.f1);
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.average_precision).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let overall_precision = ratio(all_tp, all_pred);
    let overall_recall = ratio(all_tp, all_support);
    Ok(MetricsReport {
        contributing: contributing.len(),
        per_class,
        precision,
        recall,
        cf1: f1(precision, recall),
        mean_class_f1,
        of1: f1(overall_precision, overall_recall),
        overall_precision,
        overall_recall,
        map,
    })
}

impl MetricsReport {
    /// Macro F1 restricted to a subset of labels.
    pub fn cf1_over(&self, labels: &[usize]) -> f64 {
        let c: Vec<&ClassMetrics> = labels
            .iter()
            .map(|&l| &self.per_class[l])
            .filter(|c| c.support > 0 || c.predicted > 0)
            .collect();
        if c.is_empty() {
            return 0.0;
        }
        let p = c.iter().map(|c| c.precision).sum::<f64>() / c.len() as f64;
        let r = c.iter().map(|c| c.recall).sum::<f64>() / c.len() as f64;
        f1(p, r)
    }
}
