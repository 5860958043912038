//! Multi-label F1 evaluation.
//!
//! Two aggregations are reported everywhere: `mF1`, the macro average of
//! per-class F1 scores, and `F1_all`, the micro average over every
//! (sample, class) prediction pair. Macro weights rare classes equally;
//! micro weights every decision equally, so it usually reads higher on
//! imbalanced data.

use crate::error::{OiaError, Result};
use crate::labels::NUM_ACTIONS;

/// Per-split evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsBundle {
    /// Per-action F1 in F, S, L, R order.
    pub per_action_f1: [f64; NUM_ACTIONS],
    pub action_mf1: f64,
    pub action_f1_all: f64,
    pub expl_mf1: f64,
    pub expl_f1_all: f64,
}

/// Decision rule for multi-label logits: positive iff logit > 0, i.e.
/// sigmoid probability strictly above 0.5.
pub fn threshold_predict(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&z| z > 0.0).collect()
}

/// F1 = 2TP / (2TP + FP + FN) over paired binary sequences. Returns 0 when
/// the denominator is 0 (no positives anywhere), by convention.
pub fn f1_binary(predictions: &[bool], truths: &[bool]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(OiaError::shape(
            "f1_binary",
            format!("{} predictions vs {} truths", predictions.len(), truths.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(OiaError::Empty("f1_binary input"));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fne;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

fn check_matrix(preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<usize> {
    if preds.len() != truths.len() {
        return Err(OiaError::shape(
            "f1 matrix",
            format!("{} prediction rows vs {} truth rows", preds.len(), truths.len()),
        ));
    }
    if preds.is_empty() {
        return Err(OiaError::Empty("f1 matrix input"));
    }
    let c = preds[0].len();
    if c == 0 {
        return Err(OiaError::Empty("f1 matrix classes"));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != c || t.len() != c {
            return Err(OiaError::shape(
                "f1 matrix",
                format!("row {i} has {}/{} classes, expected {c}", p.len(), t.len()),
            ));
        }
    }
    Ok(c)
}

/// Per-class F1 scores down the sample axis of an S x C binary matrix.
pub fn per_class_f1(preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<Vec<f64>> {
    let c = check_matrix(preds, truths)?;
    (0..c)
        .map(|j| {
            let p: Vec<bool> = preds.iter().map(|row| row[j]).collect();
            let t: Vec<bool> = truths.iter().map(|row| row[j]).collect();
            f1_binary(&p, &t)
        })
        .collect()
}

/// Macro average of already-computed per-class F1 scores.
pub fn mf1_from_class_scores(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(OiaError::Empty("per-class F1 list"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Macro-averaged F1: per-class F1 first, then the arithmetic mean.
pub fn mf1(preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<f64> {
    mf1_from_class_scores(&per_class_f1(preds, truths)?)
}

/// Micro-averaged F1 over the flattened (sample, class) pairs.
pub fn f1_all(preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<f64> {
    check_matrix(preds, truths)?;
    let p: Vec<bool> = preds.iter().flatten().copied().collect();
    let t: Vec<bool> = truths.iter().flatten().copied().collect();
    f1_binary(&p, &t)
}
