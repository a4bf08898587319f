//! Lovász-softmax: the Lovász extension of the per-class Jaccard loss,
//! averaged over classes present in the ground truth.

use crate::error::{Error, Result};
use crate::raster::{LabelMask, ScoreMap};

use super::{check_inputs, softmax, softmax_backward, LossResult};

/// Value and gradient of the Lovász extension of the Jaccard loss at `errors`,
/// where `fg[i]` marks ground-truth membership.
fn lovasz_extension(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut weights = vec![0.0; errors.len()];
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    let mut value = 0.0;
    for &i in &order {
        if fg[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        let w = jaccard - prev;
        prev = jaccard;
        weights[i] = w;
        value += errors[i] * w;
    }
    (value, weights)
}

/// Lovász-softmax on probabilities (`pixels x classes`, rows summing to 1).
/// Returns the value and `d value / d probs`.
pub fn lovasz_softmax_probs(probs: &[f64], gt: &LabelMask) -> Result<(f64, Vec<f64>)> {
    let c = gt.classes();
    if probs.len() != gt.len() * c {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} pixels x {c} classes",
            probs.len(),
            gt.len()
        )));
    }
    let mut grad = vec![0.0; probs.len()];
    let mut present = 0usize;
    let mut total = 0.0;
    let mut fg = vec![false; gt.len()];
    let mut errors = vec![0.0; gt.len()];
    for k in 0..c {
        for i in 0..gt.len() {
            fg[i] = gt.label(i) == k;
            let p = probs[i * c + k];
            errors[i] = if fg[i] { 1.0 - p } else { p };
        }
        if !fg.iter().any(|&f| f) {
            continue;
        }
        present += 1;
        let (value, weights) = lovasz_extension(&errors, &fg);
        total += value;
        for i in 0..gt.len() {
            grad[i * c + k] = if fg[i] { -weights[i] } else { weights[i] };
        }
    }
    if present == 0 {
        return Err(Error::Empty("no class present in ground truth".into()));
    }
    let inv = 1.0 / present as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

pub fn lovasz_softmax_loss(scores: &ScoreMap, gt: &LabelMask) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    if scores.classes() < 2 {
        return Err(Error::InvalidDimensions("lovasz-softmax needs at least two classes".into()));
    }
    let probs = softmax(scores);
    let (value, mut grad) = lovasz_softmax_probs(&probs, gt)?;
    softmax_backward(&probs, &mut grad, scores.classes());
    Ok(LossResult { value, gradient: grad })
}
