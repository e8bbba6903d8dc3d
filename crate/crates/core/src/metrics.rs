//! Evaluation metrics.

use crate::error::{invalid, Error, Result};
use crate::tasks::TaskKind;

/// Matthews correlation of binary predictions; 0 when any marginal is empty.
pub fn matthews_corrcoef(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// Pearson product-moment correlation.
pub fn pearson_corr(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("correlation of {n} points")));
    }
    let mx = predictions.iter().sum::<f64>() / n as f64;
    let my = labels.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in predictions.iter().zip(labels) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("zero variance in correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Row-wise argmax of `[n, width]` logits.
pub fn argmax_rows(logits: &[f64], width: usize) -> Vec<usize> {
    logits
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Task metric from head outputs: MCC of argmax classes or Pearson of
/// regression scores.
pub fn task_metric(kind: TaskKind, outputs: &[f64], labels: &[f64]) -> Result<f64> {
    match kind {
        TaskKind::Classification => {
            let width = if labels.is_empty() { 2 } else { outputs.len() / labels.len() };
            let preds: Vec<bool> = argmax_rows(outputs, width).into_iter().map(|c| c == 1).collect();
            let truth: Vec<bool> = labels.iter().map(|&y| y == 1.0).collect();
            matthews_corrcoef(&preds, &truth)
        }
        TaskKind::Regression => pearson_corr(outputs, labels),
    }
}

/// Fraction of argmax predictions equal to the labels.
pub fn accuracy(outputs: &[f64], labels: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let width = outputs.len() / labels.len();
    let hits = argmax_rows(outputs, width)
        .into_iter()
        .zip(labels)
        .filter(|(c, &y)| *c as f64 == y)
        .count();
    hits as f64 / labels.len() as f64
}
