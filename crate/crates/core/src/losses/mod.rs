//! Losses over score maps, each returning a value and `d value / d scores`.
//!
//! Every loss treats its inputs as a flat batch of pixels: a [`ScoreMap`] and
//! [`LabelMask`] only need to agree on pixel and class counts.

mod baseline;
mod lovasz;
mod margin;

use serde::{Deserialize, Serialize};

pub use baseline::{ce_loss, dice_loss, focal_loss, tversky_loss};
pub use lovasz::{lovasz_softmax_probs, lovasz_softmax_loss};
pub use margin::{
    calibrated_log, calibrated_log_slope, margins, mc_loss, rho_margin, MarginField,
};

use crate::calibration::MarginOffsets;
use crate::error::{Error, Result};
use crate::raster::{LabelMask, ScoreMap};

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Same layout as the input scores.
    pub gradient: Vec<f64>,
}

impl LossResult {
    fn scaled(mut self, w: f64) -> Self {
        self.value *= w;
        self.gradient.iter_mut().for_each(|g| *g *= w);
        self
    }
}

/// Something that maps (scores, labels) to a value and gradient.
pub trait Loss {
    fn evaluate(&self, scores: &ScoreMap, gt: &LabelMask) -> Result<LossResult>;
}

/// Parameters of the baseline losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub focal_gamma: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub dice_smooth: f64,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            dice_smooth: 1e-6,
            class_weights: None,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("focal gamma {} < 0", self.focal_gamma)));
        }
        for (name, v) in [("alpha", self.tversky_alpha), ("beta", self.tversky_beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("tversky {name} {v} outside (0, 1)")));
            }
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::InvalidParameter(format!("dice smooth {} must be positive", self.dice_smooth)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidParameter("class weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// A concrete, selectable loss.
#[derive(Debug, Clone, PartialEq)]
pub enum LossOp {
    CrossEntropy { class_weights: Option<Vec<f64>> },
    Focal { gamma: f64 },
    Dice { smooth: f64 },
    Tversky { alpha: f64, beta: f64, smooth: f64 },
    LovaszSoftmax,
    MarginCalibrated(MarginOffsets),
    Combined { first: Box<LossOp>, second: Box<LossOp>, weight: f64 },
}

impl LossOp {
    pub fn name(&self) -> String {
        match self {
            LossOp::CrossEntropy { .. } => "ce".into(),
            LossOp::Focal { .. } => "focal".into(),
            LossOp::Dice { .. } => "dice".into(),
            LossOp::Tversky { .. } => "tversky".into(),
            LossOp::LovaszSoftmax => "lovasz".into(),
            LossOp::MarginCalibrated(_) => "mc".into(),
            LossOp::Combined { first, second, .. } => format!("{}+{}", first.name(), second.name()),
        }
    }
}

impl Loss for LossOp {
    fn evaluate(&self, scores: &ScoreMap, gt: &LabelMask) -> Result<LossResult> {
        match self {
            LossOp::CrossEntropy { class_weights } => ce_loss(scores, gt, class_weights.as_deref()),
            LossOp::Focal { gamma } => focal_loss(scores, gt, *gamma),
            LossOp::Dice { smooth } => dice_loss(scores, gt, *smooth),
            LossOp::Tversky { alpha, beta, smooth } => tversky_loss(scores, gt, *alpha, *beta, *smooth),
            LossOp::LovaszSoftmax => lovasz_softmax_loss(scores, gt),
            LossOp::MarginCalibrated(offsets) => mc_loss(scores, gt, offsets),
            LossOp::Combined { first, second, weight } => {
                let a = first.evaluate(scores, gt)?.scaled(*weight);
                let b = second.evaluate(scores, gt)?.scaled(1.0 - weight);
                Ok(LossResult {
                    value: a.value + b.value,
                    gradient: a.gradient.iter().zip(&b.gradient).map(|(x, y)| x + y).collect(),
                })
            }
        }
    }
}

/// `weight * first + (1 - weight) * second`.
pub fn combine(first: LossOp, second: LossOp, weight: f64) -> Result<LossOp> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidParameter(format!("combination weight {weight} outside [0, 1]")));
    }
    Ok(LossOp::Combined { first: Box::new(first), second: Box::new(second), weight })
}

/// Row-wise softmax of a pixel-major score buffer.
pub fn softmax(scores: &ScoreMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.data().len());
    for row in scores.rows() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &s in row {
            let e = (s - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Pulls a gradient w.r.t. softmax probabilities back to the scores, in place.
fn softmax_backward(probs: &[f64], dprobs: &mut [f64], classes: usize) {
    for (p, d) in probs.chunks_exact(classes).zip(dprobs.chunks_exact_mut(classes)) {
        let dot: f64 = p.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        for (dj, &pj) in d.iter_mut().zip(p) {
            *dj = pj * (*dj - dot);
        }
    }
}

fn check_inputs(scores: &ScoreMap, gt: &LabelMask) -> Result<()> {
    scores.check_pixels(gt)?;
    if gt.is_empty() {
        return Err(Error::Empty("loss over zero pixels".into()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `scores`.
    pub fn numeric_grad(scores: &ScoreMap, step: f64, f: impl Fn(&ScoreMap) -> f64) -> Vec<f64> {
        let mut probe = scores.clone();
        (0..scores.data().len())
            .map(|i| {
                let x = scores.data()[i];
                probe.data_mut()[i] = x + step;
                let hi = f(&probe);
                probe.data_mut()[i] = x - step;
                let lo = f(&probe);
                probe.data_mut()[i] = x;
                (hi - lo) / (2.0 * step)
            })
            .collect()
    }

    /// Largest `|a - n| / max(|a|, |n|, floor)` over entries.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    pub fn random_instance(rng: &mut ChaCha8Rng, pixels: usize, classes: usize, spread: f64) -> (ScoreMap, LabelMask) {
        let scores = (0..pixels * classes).map(|_| rng.random_range(-spread..spread)).collect();
        let labels = (0..pixels).map(|_| rng.random_range(0..classes) as u8).collect();
        (
            ScoreMap::from_pixels(classes, scores).unwrap(),
            LabelMask::from_labels(classes, labels).unwrap(),
        )
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
