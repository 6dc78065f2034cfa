//! Binary classification scores with AD (label 1) as the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_binary(labels: &[usize]) -> Result<()> {
    match labels.iter().position(|&l| l > 1) {
        Some(i) => Err(Error::Data(format!("label {} at position {i} is not binary", labels[i]))),
        None => Ok(()),
    }
}

/// Tally `[B, 2]` probability rows against labels; AD is predicted when
/// `p(AD) >= threshold`.
pub fn confusion_from_predictions(probs: &Tensor, labels: &[usize], threshold: f64) -> Result<ConfusionMatrix> {
    let (b, k) = probs.dims2()?;
    if k != 2 {
        return Err(Error::Shape(format!("expected [B, 2] probabilities, got {:?}", probs.shape())));
    }
    let scores: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for {b} predictions", labels.len())));
    }
    confusion_from_scores(&scores, labels, threshold)
}

/// Same as [`confusion_from_predictions`] from `p(AD)` scores alone.
pub fn confusion_from_scores(scores: &[f64], labels: &[usize], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} labels for {} scores", labels.len(), scores.len())));
    }
    check_binary(labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Threshold metrics. A ratio whose denominator is zero is reported as 0
/// and flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub specificity_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<ThresholdMetrics> {
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let (accuracy, _) = ratio(cm.tp + cm.tn, cm.total());
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let (specificity, specificity_undefined) = ratio(cm.tn, cm.tn + cm.fp);
    // 2PR/(P+R) rewritten over counts; zero when precision + recall is zero.
    let (f1, f1_undefined) = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    Ok(ThresholdMetrics {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        precision_undefined,
        recall_undefined,
        specificity_undefined,
        f1_undefined,
    })
}

/// Threshold sweep from "nothing positive" to "everything positive".
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)`, starting at `(0, 0)` and ending at `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score at which each point after the first is reached.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        out
    }
}

/// Area under the ROC curve and the curve itself. The trapezoid sum is
/// accumulated in integer counts, so the area equals the Mann–Whitney
/// statistic `(concordant + tied / 2) / (P * N)` exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(f64, RocCurve)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} labels for {} scores", labels.len(), scores.len())));
    }
    check_binary(labels)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at position {i}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!("AUC is undefined with {pos} positive and {neg} negative samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area, in units of one (positive, negative) pair.
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    let auc = twice_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok((auc, RocCurve { points, thresholds }))
}

/// Serialised evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub specificity_undefined: bool,
    pub f1_undefined: bool,
    pub auc_undefined: bool,
    pub threshold: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// All six scores from `p(AD)` scores. A single-class set yields AUC 0
    /// with its flag set instead of an error.
    pub fn from_scores(scores: &[f64], labels: &[usize], threshold: f64) -> Result<(Self, Option<RocCurve>)> {
        let cm = confusion_from_scores(scores, labels, threshold)?;
        let m = compute_metrics(&cm)?;
        let single_class = labels.iter().all(|&l| l == labels[0]);
        let (auc, curve) = if single_class {
            (0.0, None)
        } else {
            let (a, c) = roc_auc(scores, labels)?;
            (a, Some(c))
        };
        let report = MetricsReport {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            specificity: m.specificity,
            f1: m.f1,
            auc,
            precision_undefined: m.precision_undefined,
            recall_undefined: m.recall_undefined,
            specificity_undefined: m.specificity_undefined,
            f1_undefined: m.f1_undefined,
            auc_undefined: single_class,
            threshold,
            samples: cm.total(),
            confusion: cm,
        };
        Ok((report, curve))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
