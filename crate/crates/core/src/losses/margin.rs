//! Margins, margin surrogates and the margin-calibrated loss.

use std::f64::consts::LN_2;

use crate::calibration::MarginOffsets;
use crate::error::{Error, Result};
use crate::raster::{LabelMask, ScoreMap};

use super::{check_inputs, LossResult};

/// `lambda[i][k] = s[i][k] - max_{j != k} s[i][j]`, laid out like the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginField {
    classes: usize,
    data: Vec<f64>,
}

impl MarginField {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Lowest-index maximiser and lowest-index runner-up of `row`.
#[inline]
fn top_two(row: &[f64]) -> (usize, usize) {
    let (mut a, mut b) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
    for (j, &v) in row.iter().enumerate().skip(2) {
        if v > row[a] {
            b = a;
            a = j;
        } else if v > row[b] {
            b = j;
        }
    }
    (a, b)
}

/// Index attaining `max_{j != k} row[j]`, lowest index on ties.
#[inline]
fn rival(k: usize, best: usize, second: usize) -> usize {
    if k == best {
        second
    } else {
        best
    }
}

pub fn margins(scores: &ScoreMap) -> Result<MarginField> {
    let c = scores.classes();
    if c < 2 {
        return Err(Error::InvalidDimensions("margins need at least two classes".into()));
    }
    let mut data = Vec::with_capacity(scores.data().len());
    for row in scores.rows() {
        let (a, b) = top_two(row);
        data.extend((0..c).map(|k| row[k] - row[rival(k, a, b)]));
    }
    Ok(MarginField { classes: c, data })
}

/// Piecewise-linear margin loss `min(1, max(0, 1 - lambda / rho))`.
pub fn rho_margin(lambda: f64, rho: f64) -> f64 {
    (1.0 - lambda / rho).clamp(0.0, 1.0)
}

/// Value and `d/d lambda` of `log2(1 + 2^(rho - lambda))`, sharing one `exp2`
/// evaluated on the side that cannot overflow.
#[inline]
fn calibrated_log_with_slope(lambda: f64, rho: f64) -> (f64, f64) {
    let u = rho - lambda;
    let t = (-u.abs()).exp2();
    let value = u.max(0.0) + t.ln_1p() / LN_2;
    let slope = if u > 0.0 { -1.0 / (1.0 + t) } else { -t / (1.0 + t) };
    (value, slope)
}

/// `log2(1 + 2^(rho - lambda))` without overflow for large `|rho - lambda|`.
pub fn calibrated_log(lambda: f64, rho: f64) -> f64 {
    calibrated_log_with_slope(lambda, rho).0
}

/// `d/d lambda` of [`calibrated_log`]; always in `(-1, 0)`.
pub fn calibrated_log_slope(lambda: f64, rho: f64) -> f64 {
    calibrated_log_with_slope(lambda, rho).1
}

/// Margin-calibrated loss over a batch of `n` pixels:
///
/// ```text
/// (1/n) sum_k [ sum_{i in Y_k} f(lambda_ik; rho_k0[k]) + sum_{i not in Y_k} f(-lambda_ik; rho_0k[k]) ]
/// ```
///
/// with `f` the calibrated log loss. The subgradient of `max_{j != k}` goes
/// entirely to the lowest-index maximiser.
pub fn mc_loss(scores: &ScoreMap, gt: &LabelMask, offsets: &MarginOffsets) -> Result<LossResult> {
    check_inputs(scores, gt)?;
    let c = scores.classes();
    if c < 2 {
        return Err(Error::InvalidDimensions("margin loss needs at least two classes".into()));
    }
    if offsets.classes() != c {
        return Err(Error::ShapeMismatch(format!(
            "offsets cover {} classes, scores have {c}",
            offsets.classes()
        )));
    }
    let n = gt.len() as f64;
    let mut total = 0.0;
    let mut gradient = vec![0.0; scores.data().len()];
    for (i, (row, grad)) in scores.rows().zip(gradient.chunks_exact_mut(c)).enumerate() {
        let y = gt.label(i);
        let (a, b) = top_two(row);
        let mut pixel_total = 0.0;
        for k in 0..c {
            let j = rival(k, a, b);
            let lambda = row[k] - row[j];
            let d_lambda = if k == y {
                let (v, d) = calibrated_log_with_slope(lambda, offsets.rho_k0[k]);
                pixel_total += v;
                d
            } else {
                let (v, d) = calibrated_log_with_slope(-lambda, offsets.rho_0k[k]);
                pixel_total += v;
                -d
            };
            grad[k] += d_lambda / n;
            grad[j] -= d_lambda / n;
        }
        total += pixel_total;
    }
    Ok(LossResult { value: total / n, gradient })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::calibration::CalibConfig;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn margin_examples() {
        let s = ScoreMap::from_pixels(3, vec![2.0, 0.5, -1.0, 0.3, 0.3, 0.3]).unwrap();
        let m = margins(&s).unwrap();
        assert_eq!(m.pixel(0), &[1.5, -1.5, -3.0]);
        assert_eq!(m.pixel(1), &[0.0, 0.0, 0.0]);
        let s = ScoreMap::from_pixels(2, vec![1.25, -0.5]).unwrap();
        assert_eq!(margins(&s).unwrap().pixel(0), &[1.75, -1.75]);
    }

    #[test]
    fn rho_margin_examples() {
        assert_eq!(rho_margin(2.0, 1.0), 0.0);
        assert_eq!(rho_margin(0.0, 1.0), 1.0);
        assert_eq!(rho_margin(1.0, 2.0), 0.5);
        assert_eq!(rho_margin(-3.0, 0.5), 1.0);
    }

    #[test]
    fn calibrated_log_examples() {
        for rho in [0.01, 1.0, 7.5, 300.0] {
            assert!((calibrated_log(rho, rho) - 1.0).abs() < 1e-15);
        }
        assert!((calibrated_log(0.0, 1.0) - 3f64.log2()).abs() < 1e-15);
        assert!((calibrated_log(0.0, 1.0) - 1.58496).abs() < 1e-5);

        // 2^-50 / ln 2 to leading order; the next term is 2^-100 / (2 ln 2).
        let far = calibrated_log(51.0, 1.0);
        let expect = 2f64.powi(-50) / LN_2;
        assert!((far - expect).abs() <= 1e-14 * expect);
        let near = calibrated_log(-49.0, 1.0);
        assert!((near - (50.0 + 2f64.powi(-50) / LN_2)).abs() < 1e-13);
        assert!(calibrated_log(-1000.0, 5.0).is_finite());
        assert!(calibrated_log(1000.0, 5.0) >= 0.0);
    }

    #[test]
    fn mc_two_class_hand_value() {
        let s = ScoreMap::from_pixels(2, vec![3.0, 2.0]).unwrap();
        let g = LabelMask::from_labels(2, vec![0]).unwrap();
        let offsets = MarginOffsets::from_parts(vec![5.0, 1.0], vec![1.0, 5.0], CalibConfig::default()).unwrap();
        let r = mc_loss(&s, &g, &offsets).unwrap();
        assert!((r.value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mc_gradient_matches_finite_differences() {
        let mut r = rng(11);
        for trial in 0..60 {
            let c = [2, 3, 5][trial % 3];
            let (s, g) = random_instance(&mut r, 1 + trial % 17, c, 3.0);
            let rho_0k = (0..c).map(|_| r.random_range(0.05..4.0)).collect();
            let rho_k0 = (0..c).map(|_| r.random_range(0.05..4.0)).collect();
            let o = MarginOffsets::from_parts(rho_0k, rho_k0, CalibConfig::default()).unwrap();
            let res = mc_loss(&s, &g, &o).unwrap();
            let num = numeric_grad(&s, 1e-5, |x| mc_loss(x, &g, &o).unwrap().value);
            let err = max_rel_err(&res.gradient, &num, 1e-4);
            assert!(err < 1e-6, "trial {trial}: {err}");
        }
    }

    #[test]
    fn mc_rejects_mismatched_offsets() {
        let s = ScoreMap::from_pixels(3, vec![0.0; 3]).unwrap();
        let g = LabelMask::from_labels(3, vec![1]).unwrap();
        assert!(mc_loss(&s, &g, &MarginOffsets::uniform(2, 1.0).unwrap()).is_err());
        let g2 = LabelMask::from_labels(3, vec![1, 0]).unwrap();
        assert!(mc_loss(&s, &g2, &MarginOffsets::uniform(3, 1.0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn surrogate_ordering(lambda in -50.0f64..50.0, rho in 1e-3f64..30.0) {
            let indicator = if lambda <= 0.0 { 1.0 } else { 0.0 };
            let phi = rho_margin(lambda, rho);
            prop_assert!(indicator <= phi);
            prop_assert!(phi <= calibrated_log(lambda, rho));
        }

        #[test]
        fn surrogate_monotone(lambda in -20.0f64..20.0, d in 0.0f64..5.0, rho in 1e-3f64..10.0, dr in 0.0f64..5.0) {
            prop_assert!(rho_margin(lambda + d, rho) <= rho_margin(lambda, rho));
            prop_assert!(calibrated_log(lambda + d, rho) <= calibrated_log(lambda, rho));
            prop_assert!(rho_margin(lambda, rho + dr) >= rho_margin(lambda, rho));
            prop_assert!(calibrated_log(lambda, rho + dr) >= calibrated_log(lambda, rho));
        }

        #[test]
        fn margin_field_signs(row in prop::collection::vec(-10.0f64..10.0, 2..6)) {
            let c = row.len();
            let s = ScoreMap::from_pixels(c, row.clone()).unwrap();
            let m = margins(&s).unwrap();
            let top = crate::raster::argmax(&row);
            prop_assert!(m.pixel(0)[top] >= 0.0);
            for k in (0..c).filter(|&k| k != top) {
                prop_assert!(m.pixel(0)[k] <= 0.0);
            }
            if c == 2 {
                prop_assert_eq!(m.pixel(0)[0], -m.pixel(0)[1]);
            }
        }

        #[test]
        fn mc_shift_invariant(
            seed in any::<u64>(),
            shifts in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let mut r = rng(seed);
            let (s, g) = random_instance(&mut r, 6, 3, 2.0);
            let o = MarginOffsets::from_parts(vec![0.5, 2.0, 4.0], vec![0.1, 0.3, 1.0], CalibConfig::default()).unwrap();
            let base = mc_loss(&s, &g, &o).unwrap();
            let shifted: Vec<f64> = s.data().iter().enumerate().map(|(i, v)| v + shifts[i / 3]).collect();
            let s2 = ScoreMap::from_pixels(3, shifted).unwrap();
            let moved = mc_loss(&s2, &g, &o).unwrap();
            prop_assert!((base.value - moved.value).abs() < 1e-9);
            for px in moved.gradient.chunks_exact(3) {
                prop_assert!(px.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
