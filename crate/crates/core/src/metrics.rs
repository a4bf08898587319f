//! Confusion-matrix accumulation and dataset-level IoU.
//!
//! IoU is always computed from globally accumulated counts, never averaged
//! per image. A class that is neither present nor predicted has IoU 1 (0/0 = 1).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::{LabelMask, PredMask};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], total: 0 }
    }

    pub fn from_labels(gt: &LabelMask, pred: &PredMask) -> Result<Self> {
        let mut cm = Self::new(gt.classes());
        cm.accumulate(gt, pred)?;
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn accumulate(&mut self, gt: &LabelMask, pred: &PredMask) -> Result<()> {
        if gt.len() != pred.len() || gt.classes() != self.classes || pred.classes() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "gt {} px (c={}), pred {} px (c={}), matrix c={}",
                gt.len(),
                gt.classes(),
                pred.len(),
                pred.classes(),
                self.classes
            )));
        }
        self.accumulate_raw(gt.data(), pred.data());
        Ok(())
    }

    pub(crate) fn accumulate_raw(&mut self, gt: &[u8], pred: &[u8]) {
        for (&y, &p) in gt.iter().zip(pred) {
            self.counts[y as usize * self.classes + p as usize] += 1;
        }
        self.total += gt.len() as u64;
    }

    /// Entrywise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, k)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.count(k, k)).sum()
    }

    pub fn iou(&self, k: usize) -> f64 {
        let inter = self.count(k, k);
        let union = self.row_sum(k) + self.col_sum(k) - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Class observed in the ground truth or predicted at least once.
    pub fn present(&self, k: usize) -> bool {
        self.row_sum(k) > 0 || self.col_sum(k) > 0
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.total == 0 {
            return Err(Error::Empty("confusion matrix has no pixels".into()));
        }
        let per_class_iou: Vec<f64> = (0..self.classes).map(|k| self.iou(k)).collect();
        let per_class_presence: Vec<bool> = (0..self.classes).map(|k| self.present(k)).collect();
        let miou = per_class_iou.iter().sum::<f64>() / self.classes as f64;
        Ok(MetricReport {
            miou,
            pixel_accuracy: self.trace() as f64 / self.total as f64,
            per_class_iou,
            per_class_presence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class_iou: Vec<f64>,
    /// Mean over all classes, absent ones contributing 1.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_presence: Vec<bool>,
}

impl MetricReport {
    /// mIoU restricted to classes seen in ground truth or predictions.
    pub fn miou_present(&self) -> f64 {
        let (sum, n) = self
            .per_class_iou
            .iter()
            .zip(&self.per_class_presence)
            .filter(|(_, &p)| p)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (k, v) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(out, "{k},{v:.10}");
        }
        let _ = writeln!(out, "miou,{:.10}", self.miou);
        let _ = writeln!(out, "pixel_accuracy,{:.10}", self.pixel_accuracy);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(gt: &[u8], pred: &[u8], c: usize) -> ConfusionMatrix {
        let gt = LabelMask::from_labels(c, gt.to_vec()).unwrap();
        let pred = PredMask::new(LabelMask::from_labels(c, pred.to_vec()).unwrap());
        ConfusionMatrix::from_labels(&gt, &pred).unwrap()
    }

    #[test]
    fn accumulate_tallies() {
        let m = cm(&[0, 1], &[0, 1], 2);
        assert_eq!((m.count(0, 0), m.count(1, 1), m.total()), (1, 1, 2));
        assert_eq!(cm(&[0, 0], &[1, 1], 2).count(0, 1), 2);
        let m = cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!((m.count(0, 0), m.count(0, 1), m.count(1, 1), m.count(1, 0)), (1, 1, 2, 0));
    }

    #[test]
    fn iou_examples() {
        let m = cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 3);
        assert_eq!(m.iou(2), 1.0);
        assert_eq!(m.iou(1), 2.0 / 3.0);
        assert_eq!(m.iou(0), 0.5);
        let perfect = cm(&[0, 2, 1, 1], &[0, 2, 1, 1], 3);
        assert!((0..3).all(|k| perfect.iou(k) == 1.0));
    }

    #[test]
    fn report_examples() {
        let r = cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).report().unwrap();
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.pixel_accuracy, 0.75);
        let r = cm(&[0, 1, 0], &[0, 1, 0], 3).report().unwrap();
        assert_eq!((r.miou, r.pixel_accuracy), (1.0, 1.0));
        assert_eq!(r.per_class_presence, vec![true, true, false]);
        assert!(ConfusionMatrix::new(2).report().is_err());
    }

    #[test]
    fn shape_mismatch() {
        let gt = LabelMask::from_labels(2, vec![0, 1]).unwrap();
        let pred = PredMask::new(LabelMask::from_labels(2, vec![0]).unwrap());
        assert!(ConfusionMatrix::new(2).accumulate(&gt, &pred).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = cm(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).report().unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou");
        assert!(lines[3].starts_with("miou,0.58333"));
        assert_eq!(lines[4], "pixel_accuracy,0.7500000000");
    }

    fn arb_pair() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
        (2usize..6, 1usize..64).prop_flat_map(|(c, n)| {
            (
                Just(c),
                prop::collection::vec(0..c as u8, n),
                prop::collection::vec(0..c as u8, n),
            )
        })
    }

    proptest! {
        #[test]
        fn merge_order_independent((c, gt, pred) in arb_pair(), split in 0usize..64) {
            let split = split.min(gt.len());
            let whole = cm(&gt, &pred, c);
            let mut a = ConfusionMatrix::new(c);
            a.accumulate_raw(&gt[split..], &pred[split..]);
            let mut b = ConfusionMatrix::new(c);
            b.accumulate_raw(&gt[..split], &pred[..split]);
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            b.merge(&a).unwrap();
            prop_assert_eq!(&ab, &whole);
            prop_assert_eq!(&b, &whole);
        }

        #[test]
        fn iou_bounded_and_monotone((c, gt, pred) in arb_pair(), pick in any::<prop::sample::Index>()) {
            let m = cm(&gt, &pred, c);
            for k in 0..c {
                let v = m.iou(k);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let i = pick.index(gt.len());
            if gt[i] != pred[i] {
                let k = gt[i] as usize;
                let mut fixed = pred.clone();
                fixed[i] = gt[i];
                prop_assert!(cm(&gt, &fixed, c).iou(k) >= m.iou(k));
            }
        }
    }
}
