//! Cross-entropy, focal, soft Dice and Tversky losses on softmax probabilities.

use crate::error::{Error, Result};
use crate::raster::{LabelMask, ScoreMap};

use super::{check_inputs, softmax, softmax_backward, LossResult};

/// Log-softmax of the labelled class and the full softmax row, per pixel.
fn log_probs(scores: &ScoreMap, gt: &LabelMask) -> (Vec<f64>, Vec<f64>) {
    let c = scores.classes();
    let mut probs = Vec::with_capacity(scores.data().len());
    let mut log_py = Vec::with_capacity(gt.len());
    for (i, row) in scores.rows().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = probs.len();
        probs.extend(row.iter().map(|s| (s - max).exp()));
        let sum: f64 = probs[start..].iter().sum();
        probs[start..].iter_mut().for_each(|e| *e /= sum);
        log_py.push(row[gt.label(i)] - max - sum.ln());
    }
    debug_assert_eq!(probs.len(), gt.len() * c);
    (probs, log_py)
}

/// Mean softmax cross-entropy (natural log). With `class_weights`, the mean is
/// weighted and normalised by the total weight of the batch's labels.
pub fn ce_loss(scores: &ScoreMap, gt: &LabelMask, class_weights: Option<&[f64]>) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    let c = scores.classes();
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::ShapeMismatch(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let weight = |y: usize| class_weights.map_or(1.0, |w| w[y]);
    let (mut grad, log_py) = log_probs(scores, gt);
    let norm: f64 = (0..gt.len()).map(|i| weight(gt.label(i))).sum();
    if !(norm > 0.0) {
        return Err(Error::InvalidParameter("labels in batch carry zero total weight".into()));
    }
    let mut value = 0.0;
    for (i, g) in grad.chunks_exact_mut(c).enumerate() {
        let y = gt.label(i);
        let w = weight(y);
        value += w * -log_py[i];
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= w / norm);
    }
    Ok(LossResult { value: value / norm, gradient: grad })
}

/// Mean of `-(1 - p_y)^gamma ln p_y`.
pub fn focal_loss(scores: &ScoreMap, gt: &LabelMask, gamma: f64) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("focal gamma {gamma} < 0")));
    }
    let c = scores.classes();
    let n = gt.len() as f64;
    let (mut grad, log_py) = log_probs(scores, gt);
    let mut value = 0.0;
    for (i, g) in grad.chunks_exact_mut(c).enumerate() {
        let y = gt.label(i);
        let lp = log_py[i];
        let p = lp.exp();
        let q = -lp.exp_m1();
        let w = q.powf(gamma);
        value -= w * lp;
        // dL/ds_j = (delta_jy - p_j) * (gamma q^(gamma-1) p ln p - q^gamma)
        let focus = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p * lp };
        let factor = (focus - w) / n;
        for (j, v) in g.iter_mut().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            *v = (delta - *v) * factor;
        }
    }
    Ok(LossResult { value: value / n, gradient: grad })
}

/// `1 - mean_k (2 TP_k + s) / (2 TP_k + 2a FP_k + 2b FN_k + s)` over all classes,
/// with soft counts from softmax probabilities. `a = b = 0.5` is soft Dice.
fn soft_overlap(scores: &ScoreMap, gt: &LabelMask, alpha: f64, beta: f64, smooth: f64) -> LossResult {
    let c = scores.classes();
    let probs = softmax(scores);
    let mut tp = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for (i, p) in probs.chunks_exact(c).enumerate() {
        let y = gt.label(i);
        tp[y] += p[y];
        gsum[y] += 1.0;
        for (acc, v) in psum.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let mut value = 0.0;
    // d index_k / d p_ik split into the part every pixel sees and the part only labelled pixels add.
    let mut d_any = vec![0.0; c];
    let mut d_label = vec![0.0; c];
    for k in 0..c {
        let num = 2.0 * tp[k] + smooth;
        let den = 2.0 * (1.0 - alpha - beta) * tp[k] + 2.0 * alpha * psum[k] + 2.0 * beta * gsum[k] + smooth;
        value += num / den;
        d_any[k] = -num * 2.0 * alpha / (den * den);
        d_label[k] = 2.0 / den - num * 2.0 * (1.0 - alpha - beta) / (den * den);
    }
    let inv_c = 1.0 / c as f64;
    let mut grad = vec![0.0; probs.len()];
    for (i, g) in grad.chunks_exact_mut(c).enumerate() {
        let y = gt.label(i);
        for k in 0..c {
            g[k] = -inv_c * d_any[k];
        }
        g[y] -= inv_c * d_label[y];
    }
    softmax_backward(&probs, &mut grad, c);
    LossResult { value: 1.0 - value * inv_c, gradient: grad }
}

/// Soft Dice loss `1 - mean_k (2 sum p g + s) / (sum p + sum g + s)`.
pub fn dice_loss(scores: &ScoreMap, gt: &LabelMask, smooth: f64) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    if !(smooth > 0.0) {
        return Err(Error::InvalidParameter(format!("dice smooth {smooth} must be positive")));
    }
    Ok(soft_overlap(scores, gt, 0.5, 0.5, smooth))
}

/// Tversky loss `1 - mean_k TP / (TP + alpha FP + beta FN)`, smoothed so that
/// `alpha = beta = 0.5` coincides with [`dice_loss`] at the same `smooth`.
pub fn tversky_loss(scores: &ScoreMap, gt: &LabelMask, alpha: f64, beta: f64, smooth: f64) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidParameter(format!("tversky {name} {v} outside (0, 1)")));
        }
    }
    if !(smooth > 0.0) {
        return Err(Error::InvalidParameter(format!("tversky smooth {smooth} must be positive")));
    }
    Ok(soft_overlap(scores, gt, alpha, beta, smooth))
}
