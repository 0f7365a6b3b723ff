//! Confusion tallies, the four per-class rates, ROC curves and AUC.
//!
//! `fpr_eq4` computes FP/(TN+FP) under that name on purpose: the source
//! formula sheet labels this expression "specificity" although it is the
//! false-positive rate. Textbook specificity TN/(TN+FP) is exposed
//! separately as [`ConfusionCounts::specificity`].
//!
//! AUC is computed two ways — trapezoidal integration of the ROC curve and
//! the tie-corrected pair-counting rank statistic — and [`auc_score`]
//! asserts they agree to 1e-12.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// TP/TN/FP/FN tallies; class 1 (positive/satisfied) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Sum two tallies (metrics over concatenated prediction sets).
    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// (TP+TN) / total.
    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::InvalidArgument {
                op: "accuracy",
                msg: "empty confusion tally".into(),
            });
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    /// Precision, recall and their harmonic mean. Zero denominators make
    /// the affected quantity 0.
    pub fn f1(&self) -> F1Scores {
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Scores {
            precision,
            recall,
            f1,
        }
    }

    /// TP / (TP+FN), the true-positive rate.
    pub fn sensitivity(&self) -> Result<f64> {
        if self.tp + self.fn_ == 0 {
            return Err(Error::InvalidArgument {
                op: "sensitivity",
                msg: "no positive examples in tally".into(),
            });
        }
        Ok(self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    /// FP / (TN+FP), exactly as the formula sheet writes it.
    pub fn fpr_eq4(&self) -> Result<f64> {
        if self.tn + self.fp == 0 {
            return Err(Error::InvalidArgument {
                op: "fpr_eq4",
                msg: "no negative examples in tally".into(),
            });
        }
        Ok(self.fp as f64 / (self.tn + self.fp) as f64)
    }

    /// TN / (TN+FP), textbook specificity.
    pub fn specificity(&self) -> Result<f64> {
        Ok(1.0 - self.fpr_eq4()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Tally predictions (score >= threshold means class 1) against labels.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument {
            op: "confusion",
            msg: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument {
            op: "confusion",
            msg: "empty input".into(),
        });
    }
    let mut cc = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, l) {
            (true, 1) => cc.tp += 1,
            (true, _) => cc.fp += 1,
            (false, 1) => cc.fn_ += 1,
            (false, _) => cc.tn += 1,
        }
    }
    Ok(cc)
}

/// One point of an ROC curve, thresholds descending along the curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Sweep thresholds over the distinct score set plus ±infinity sentinels.
/// The curve is anchored at (0,0) and (1,1) and is monotone in both
/// coordinates.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument {
            op: "roc_curve",
            msg: "scores and labels must be equal-length and non-empty".into(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument {
            op: "roc_curve",
            msg: "both classes must be present".into(),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // absorb the whole tied group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(points)
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "auc",
            msg: format!("{} points, need at least 2", points.len()),
        });
    }
    let mut area = 0.0;
    for pair in points.windows(2) {
        let dx = pair[1].fpr - pair[0].fpr;
        area += dx * (pair[0].tpr + pair[1].tpr) / 2.0;
    }
    Ok(area)
}

/// The rank statistic: fraction of (positive, negative) pairs where the
/// positive outscores the negative, ties counting one half. This is the
/// independent oracle for the trapezoid route.
pub fn auc_pair_count(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 1)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument {
            op: "auc_pair_count",
            msg: "both classes must be present".into(),
        });
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// AUC from raw scores: both routes computed, agreement asserted to 1e-12.
pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let trapezoid = auc(&roc_curve(scores, labels)?)?;
    let pairs = auc_pair_count(scores, labels)?;
    debug_assert!(
        (trapezoid - pairs).abs() < 1e-12,
        "AUC routes disagree: trapezoid {trapezoid} vs pair-count {pairs}"
    );
    Ok(trapezoid)
}

/// ROC CSV export: header `threshold,fpr,tpr`, 17 significant digits.
pub fn write_roc_csv<W: std::io::Write>(points: &[RocPoint], mut out: W) -> Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(out, "{:.16e},{:.16e},{:.16e}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}
