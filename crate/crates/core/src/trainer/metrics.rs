use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality with support-weighted averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and F1 of one class from its counts; 0/0 is 0.
pub fn class_scores(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp as f64, (tp + fp) as f64);
    let r = ratio(tp as f64, (tp + fn_) as f64);
    (p, r, ratio(2.0 * p * r, p + r))
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let total: usize = support.iter().sum();
        if total == 0 {
            return Err(Error::Contract("cannot score an empty split".into()));
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let mut report = Self {
            accuracy: correct as f64 / total as f64,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            confusion,
            support,
            per_class_precision: Vec::with_capacity(c),
            per_class_recall: Vec::with_capacity(c),
            per_class_f1: Vec::with_capacity(c),
        };
        for k in 0..c {
            let tp = report.confusion[k][k];
            let predicted: usize = (0..c).map(|i| report.confusion[i][k]).sum();
            let (p, r, f) = class_scores(tp, predicted - tp, report.support[k] - tp);
            let w = report.support[k] as f64 / total as f64;
            report.precision += w * p;
            report.recall += w * r;
            report.f1 += w * f;
            report.per_class_precision.push(p);
            report.per_class_recall.push(r);
            report.per_class_f1.push(f);
        }
        Ok(report)
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::shape("metrics", &[labels.len()], &[preds.len()]));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (i, (&y, &p)) in labels.iter().zip(preds).enumerate() {
            if y >= classes || p >= classes {
                return Err(Error::Data {
                    index: i,
                    msg: format!("label {y} or prediction {p} outside [0, {classes})"),
                });
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}
