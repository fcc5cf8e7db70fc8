//! Accuracy and mean average precision.
//!
//! Ties are broken toward the smaller index, both for argmax and when ranking
//! scores for average precision.

use crate::error::{Error, Result};

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Average precision of one class: the mean, over positive items, of the
/// precision at the rank where each positive is retrieved. `None` when the
/// class has no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps the smaller index first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean of per-class average precision over classes with at least one
/// positive. `scores[s][j]` is the score of sample `s` for class `j`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("mean average precision of an empty set".into()));
    }
    if labels.len() != scores.len() {
        return Err(Error::Argument(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return Err(Error::Argument("ragged score or label matrix".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for j in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[j]).collect();
        if let Some(ap) = average_precision(&col, &lab) {
            total += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("no class has a positive label".into()));
    }
    Ok(total / counted as f64)
}
