//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub positives: usize,
    pub accuracy: f64,
    /// Absent for single-class data.
    pub auc: Option<f64>,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Input("no scores to evaluate".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    Ok(())
}

/// Fraction of items whose `score >= 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Area under the ROC curve by trapezoidal integration over every distinct threshold.
/// Tied scores move the curve diagonally, which counts ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(Some(area / (pos as f64 * neg as f64)))
}

pub fn classification_report(scores: &[f64], labels: &[u8]) -> Result<ClassificationReport> {
    Ok(ClassificationReport {
        n: scores.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
        accuracy: accuracy(scores, labels)?,
        auc: roc_auc(scores, labels)?,
    })
}
