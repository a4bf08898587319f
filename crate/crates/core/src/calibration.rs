//! Label statistics and closed-form margin offsets.
//!
//! For class `k` with `n_k` of `n` pixels, the background-side offset is
//! proportional to `sqrt(n - n_k) / n_k`, so rarer classes get larger offsets.
//! The foreground-side offset is `rho_k0 = mu_k * rho_0k` with
//!
//! ```text
//! mu_k = p_k sqrt(n_k) / (upsilon (n - n_k) - p_k sqrt(n - n_k))
//! ```
//!
//! Offsets are scaled so that their mean over classes equals `tau`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DatasetManifest, LabelMask};

/// Dataset label distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub pixel_counts: Vec<u64>,
    pub total: u64,
    pub pixels_per_image: u64,
}

impl ClassStats {
    pub fn from_counts(pixel_counts: Vec<u64>, pixels_per_image: u64) -> Result<Self> {
        if pixel_counts.len() < 2 {
            return Err(Error::InvalidDimensions("need at least two classes".into()));
        }
        let total: u64 = pixel_counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("no labelled pixels".into()));
        }
        Ok(Self { pixel_counts, total, pixels_per_image })
    }

    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> Result<Self> {
        let mut iter = masks.into_iter().peekable();
        let first = iter.peek().ok_or_else(|| Error::Empty("no masks".into()))?;
        let (classes, m) = (first.classes(), first.len());
        let mut counts = vec![0u64; classes];
        for mask in iter {
            if mask.classes() != classes || mask.len() != m {
                return Err(Error::ShapeMismatch("masks disagree on class count or size".into()));
            }
            for (acc, n) in counts.iter_mut().zip(mask.class_counts()) {
                *acc += n;
            }
        }
        Self::from_counts(counts, m as u64)
    }

    pub fn classes(&self) -> usize {
        self.pixel_counts.len()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.pixel_counts.iter().map(|&k| k as f64 / self.total as f64).collect()
    }

    /// Classes with no pixels; calibration falls back for these.
    pub fn zero_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&k| self.pixel_counts[k] == 0).collect()
    }
}

/// Exact per-class pixel counts over every mask in the manifest.
pub fn class_stats(manifest: &DatasetManifest) -> Result<ClassStats> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest has no entries".into()));
    }
    let masks = manifest.load_masks()?;
    let stats = ClassStats::from_masks(&masks)?;
    for k in stats.zero_classes() {
        warn!("class {k} has no pixels in the manifest; its offset is undefined");
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Mean background-side offset.
    pub tau: f64,
    pub upsilon: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { tau: 10.0, upsilon: 1.0 }
    }
}

impl CalibConfig {
    pub fn new(tau: f64, upsilon: f64) -> Result<Self> {
        let cfg = Self { tau, upsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.upsilon > 0.0 && self.upsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("upsilon must be positive, got {}", self.upsilon)));
        }
        Ok(())
    }
}

/// Per-class margin offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginOffsets {
    /// Offset for non-k pixels against class k.
    pub rho_0k: Vec<f64>,
    /// Offset for class-k pixels.
    pub rho_k0: Vec<f64>,
    pub mu_k: Vec<f64>,
    pub config: CalibConfig,
}

impl MarginOffsets {
    /// Offsets not derived from statistics; `mu_k` is taken as `rho_k0 / rho_0k`.
    pub fn from_parts(rho_0k: Vec<f64>, rho_k0: Vec<f64>, config: CalibConfig) -> Result<Self> {
        if rho_0k.len() != rho_k0.len() {
            return Err(Error::ShapeMismatch("offset vectors differ in length".into()));
        }
        if let Some(k) = rho_0k.iter().chain(&rho_k0).position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("offset entry {k} is not positive and finite")));
        }
        let mu_k = rho_k0.iter().zip(&rho_0k).map(|(a, b)| a / b).collect();
        Ok(Self { rho_0k, rho_k0, mu_k, config })
    }

    /// Same offset everywhere.
    pub fn uniform(classes: usize, rho: f64) -> Result<Self> {
        Self::from_parts(vec![rho; classes], vec![rho; classes], CalibConfig { tau: rho, upsilon: 1.0 })
    }

    pub fn classes(&self) -> usize {
        self.rho_0k.len()
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_0k.iter().chain(&self.rho_k0).copied().fold(f64::MIN, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("RHO1 {} {} {}\n", self.classes(), self.config.tau, self.config.upsilon);
        for k in 0..self.classes() {
            let _ = writeln!(out, "{k} {:.17e} {:.17e} {:.17e}", self.rho_0k[k], self.rho_k0[k], self.mu_k[k]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::MalformedHeader("empty offsets file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "RHO1" {
            return Err(Error::MalformedHeader(format!("bad offsets header {header:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedHeader(format!("bad number {s:?}")))
        };
        let c: usize = fields[1].parse().map_err(|_| Error::MalformedHeader(format!("bad class count {:?}", fields[1])))?;
        let config = CalibConfig { tau: num(fields[2])?, upsilon: num(fields[3])? };
        let (mut rho_0k, mut rho_k0, mut mu_k) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        let mut seen = vec![false; c];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::MalformedHeader(format!("bad offsets line {line:?}")));
            }
            let k: usize = f[0].parse().map_err(|_| Error::MalformedHeader(format!("bad class {:?}", f[0])))?;
            if k >= c || seen[k] {
                return Err(Error::MalformedHeader(format!("unexpected class line {k}")));
            }
            seen[k] = true;
            rho_0k[k] = num(f[1])?;
            rho_k0[k] = num(f[2])?;
            mu_k[k] = num(f[3])?;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::MalformedHeader(format!("missing offsets for class {k}")));
        }
        Ok(Self { rho_0k, rho_k0, mu_k, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Smallest `upsilon` (exclusive) for which `mu_k` has a positive denominator.
pub fn min_upsilon(stats: &ClassStats, k: usize) -> f64 {
    let n = stats.total as f64;
    let nk = stats.pixel_counts[k] as f64;
    let rest = n - nk;
    if rest <= 0.0 {
        f64::INFINITY
    } else {
        (nk / n) / rest.sqrt()
    }
}

/// Offset ratios `mu_k`. Zero-pixel classes get `mu_k = 0`.
pub fn compute_mu(stats: &ClassStats, upsilon: f64) -> Result<Vec<f64>> {
    if !(upsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("upsilon must be positive, got {upsilon}")));
    }
    let n = stats.total as f64;
    stats
        .pixel_counts
        .iter()
        .enumerate()
        .map(|(k, &count)| {
            let nk = count as f64;
            let pk = nk / n;
            let rest = n - nk;
            let denom = upsilon * rest - pk * rest.sqrt();
            if denom <= 0.0 {
                return Err(Error::Calibration {
                    class: k,
                    reason: format!(
                        "mu denominator {denom:e} is not positive; upsilon must exceed {:e}",
                        min_upsilon(stats, k)
                    ),
                });
            }
            Ok(pk * nk.sqrt() / denom)
        })
        .collect()
}

pub fn compute_offsets(stats: &ClassStats, config: &CalibConfig) -> Result<MarginOffsets> {
    config.validate()?;
    let mut mu = compute_mu(stats, config.upsilon)?;
    let n = stats.total as f64;
    let mut raw: Vec<Option<f64>> = stats
        .pixel_counts
        .iter()
        .map(|&c| (c > 0).then(|| (n - c as f64).sqrt() / c as f64))
        .collect();

    let max_raw = raw.iter().flatten().copied().fold(0.0, f64::max);
    let max_mu = mu.iter().copied().fold(0.0, f64::max);
    if !(max_raw > 0.0 && max_mu > 0.0) {
        let k = stats.pixel_counts.iter().position(|&c| c > 0).unwrap_or(0);
        return Err(Error::Calibration { class: k, reason: "only one class has pixels".into() });
    }
    for k in stats.zero_classes() {
        warn!("class {k} has no pixels; assigning the largest computed offset");
        raw[k] = Some(max_raw);
        mu[k] = max_mu;
    }

    let raw: Vec<f64> = raw.into_iter().map(|r| r.unwrap_or(max_raw)).collect();
    let scale = config.tau * raw.len() as f64 / raw.iter().sum::<f64>();
    let rho_0k: Vec<f64> = raw.iter().map(|r| r * scale).collect();
    let rho_k0 = rho_0k.iter().zip(&mu).map(|(r, m)| r * m).collect();
    Ok(MarginOffsets { rho_0k, rho_k0, mu_k: mu, config: *config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(counts: &[u64]) -> ClassStats {
        ClassStats::from_counts(counts.to_vec(), 1).unwrap()
    }

    #[test]
    fn stats_from_masks() {
        let m = LabelMask::new(2, 2, 2, vec![0; 4]).unwrap();
        let s = ClassStats::from_masks([&m, &m]).unwrap();
        assert_eq!((s.total, s.pixel_counts[0]), (8, 8));
        assert_eq!(s.frequencies()[0], 1.0);
        assert_eq!(s.zero_classes(), vec![1]);
        let s = stats(&[90, 10]);
        assert_eq!(s.frequencies(), vec![0.9, 0.1]);
        assert!(ClassStats::from_masks(std::iter::empty::<&LabelMask>()).is_err());
    }

    #[test]
    fn mu_examples() {
        let mu = compute_mu(&stats(&[80, 20]), 1.0).unwrap();
        let expect = 0.2 * 20f64.sqrt() / (80.0 - 0.2 * 80f64.sqrt());
        assert!((mu[1] - expect).abs() < 1e-15);
        assert!((mu[1] - 0.011436).abs() < 5e-7);

        let mu = compute_mu(&stats(&[50, 50]), 1.0).unwrap();
        let expect = 0.5 * 50f64.sqrt() / (50.0 - 0.5 * 50f64.sqrt());
        assert!((mu[0] - expect).abs() < 1e-15);
        assert!((mu[0] - 0.07609113).abs() < 1e-8);
    }

    #[test]
    fn mu_inadmissible_upsilon() {
        let s = stats(&[50, 50]);
        let floor = min_upsilon(&s, 0);
        match compute_mu(&s, floor * 0.5) {
            Err(Error::Calibration { class: 0, reason }) => assert!(reason.contains("upsilon must exceed")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(compute_mu(&s, floor * 1.01).is_ok());
    }

    #[test]
    fn offsets_ratio_and_symmetry() {
        let o = compute_offsets(&stats(&[90, 10]), &CalibConfig::new(10.0, 1.0).unwrap()).unwrap();
        assert!((o.rho_0k[0] / o.rho_0k[1] - 1.0 / 27.0).abs() < 1e-12);
        assert!(((o.rho_0k[0] + o.rho_0k[1]) / 2.0 - 10.0).abs() < 1e-12);

        let o = compute_offsets(&stats(&[25, 25, 25, 25]), &CalibConfig::new(3.0, 1.0).unwrap()).unwrap();
        assert!(o.rho_0k.iter().all(|r| (r - 3.0).abs() < 1e-12));
    }

    #[test]
    fn tau_scales_linearly() {
        let s = stats(&[700, 200, 100]);
        let a = compute_offsets(&s, &CalibConfig::new(1.5, 0.5).unwrap()).unwrap();
        let b = compute_offsets(&s, &CalibConfig::new(3.0, 0.5).unwrap()).unwrap();
        for k in 0..3 {
            assert!((b.rho_0k[k] - 2.0 * a.rho_0k[k]).abs() < 1e-12 * b.rho_0k[k]);
            assert!((b.rho_k0[k] - 2.0 * a.rho_k0[k]).abs() < 1e-12 * b.rho_k0[k]);
            assert_eq!(a.mu_k[k], b.mu_k[k]);
        }
    }

    #[test]
    fn zero_class_fallback() {
        let o = compute_offsets(&stats(&[90, 10, 0]), &CalibConfig::default()).unwrap();
        assert_eq!(o.rho_0k[2], o.rho_0k[1]);
        assert!(o.rho_k0.iter().all(|r| *r > 0.0));
        assert!(compute_offsets(&stats(&[100, 0]), &CalibConfig::default()).is_err());
    }

    #[test]
    fn offsets_text_round_trip() {
        let o = compute_offsets(&stats(&[700, 200, 100]), &CalibConfig::default()).unwrap();
        let text = o.to_text();
        assert!(text.starts_with("RHO1 3 10 1\n"));
        assert_eq!(MarginOffsets::from_text(&text).unwrap(), o);
        assert!(MarginOffsets::from_text("RHO1 2 1 1\n0 1 1 1\n").is_err());
    }

    proptest! {
        #[test]
        fn ratio_law_and_rarity(counts in prop::collection::vec(1u64..10_000, 2..7), tau in 0.1f64..50.0) {
            let s = stats(&counts);
            let o = compute_offsets(&s, &CalibConfig::new(tau, 1.0).unwrap()).unwrap();
            let n = s.total as f64;
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    let (ni, nj) = (counts[i] as f64, counts[j] as f64);
                    let want = (nj / ni) * (n - ni).sqrt() / (n - nj).sqrt();
                    let got = o.rho_0k[i] / o.rho_0k[j];
                    prop_assert!((got - want).abs() <= 1e-9 * want);
                    if counts[i] < counts[j] {
                        prop_assert!(o.rho_0k[i] > o.rho_0k[j]);
                    }
                }
                prop_assert!((o.rho_k0[i] - o.mu_k[i] * o.rho_0k[i]).abs() <= 1e-15 * o.rho_k0[i].abs());
            }
        }
    }
}
