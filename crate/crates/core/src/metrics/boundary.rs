//! Boundary accuracy, precision, recall and F1 over binary labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Micro-averaged confusion counts and the scores derived from them.
/// Positive class is label 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl BoundaryScore {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            acc: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1: harmonic_f1(precision, recall),
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn boundary_score(preds: &[u8], golds: &[u8]) -> Result<BoundaryScore> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        if p > 1 {
            return Err(Error::InvalidLabel(p as i64));
        }
        if g > 1 {
            return Err(Error::InvalidLabel(g as i64));
        }
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    Ok(BoundaryScore::from_counts(tp, fp, tn, fn_))
}
