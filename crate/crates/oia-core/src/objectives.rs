//! Training objectives: the weighted multi-task loss and the single-action
//! cross-entropy variant.

use crate::error::{OiaError, Result};
use crate::labels::{ActionLabel, ExplanationLabel, NUM_ACTIONS};
use crate::tape::{Tape, TensorId};

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(OiaError::Config(format!(
            "lambda must be >= 0 or infinity, got {lambda}"
        )));
    }
    Ok(())
}

fn bce_sum(tape: &mut Tape, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for (j, &t) in targets.iter().enumerate() {
        let z = tape.gather1(logits, j)?;
        let l = tape.bce_with_logits(z, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    total.ok_or(OiaError::Empty("loss targets"))
}

/// L = L_A + lambda * L_E, where each term is a sum of per-flag binary cross
/// entropies. lambda = 0 drops the explanation term entirely; lambda = inf
/// returns the explanation term alone (explanation-only training).
pub fn multitask_loss(
    tape: &mut Tape,
    action_logits: TensorId,
    expl_logits: TensorId,
    action: &ActionLabel,
    explanation: &ExplanationLabel,
    lambda: f64,
) -> Result<TensorId> {
    check_lambda(lambda)?;
    if lambda.is_infinite() {
        return bce_sum(tape, expl_logits, &explanation.targets());
    }
    let l_a = bce_sum(tape, action_logits, &action.targets())?;
    if lambda == 0.0 {
        return Ok(l_a);
    }
    let l_e = bce_sum(tape, expl_logits, &explanation.targets())?;
    let weighted = tape.scale(l_e, lambda);
    tape.add(l_a, weighted)
}

/// Collapse a multi-hot action label to one class index for single-action
/// training. Priority order: stop, left, right, forward — the most
/// safety-critical flag wins when several are set.
pub fn single_action_target(action: &ActionLabel) -> usize {
    for idx in [1usize, 2, 3, 0] {
        if action.bit(idx) {
            return idx;
        }
    }
    0
}

/// Cross entropy over the 4-way action softmax plus the weighted explanation
/// term, sharing the lambda conventions of [`multitask_loss`].
pub fn single_action_loss(
    tape: &mut Tape,
    action_logits: TensorId,
    expl_logits: TensorId,
    action: &ActionLabel,
    explanation: &ExplanationLabel,
    lambda: f64,
) -> Result<TensorId> {
    check_lambda(lambda)?;
    if lambda.is_infinite() {
        return bce_sum(tape, expl_logits, &explanation.targets());
    }
    let target = single_action_target(action);
    if target >= NUM_ACTIONS {
        return Err(OiaError::Invalid(format!(
            "action class {target} out of range"
        )));
    }
    let l_a = tape.cross_entropy_logits(action_logits, target)?;
    if lambda == 0.0 {
        return Ok(l_a);
    }
    let l_e = bce_sum(tape, expl_logits, &explanation.targets())?;
    let weighted = tape.scale(l_e, lambda);
    tape.add(l_a, weighted)
}
