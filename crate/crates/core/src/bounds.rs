//! Empirical error probabilities, their margin surrogates, IoU lower bounds
//! and the generalization error bound `epsilon`.
//!
//! For class `k` (0-based, "background" meaning every other class):
//!
//! ```text
//! iou_lower_k = (p_k - ell_k0) / (p_k + ell_0k)
//! epsilon_k   = (sqrt(n - n_k) + sqrt(n_k) / mu_k) / (n_k rho_0k / (4 c F) - sqrt(n - n_k))
//! ```
//!
//! `F` stands in for the hypothesis-class complexity plus the confidence term
//! and is supplied by the caller.

use std::fmt::Write as _;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{compute_offsets, CalibConfig, ClassStats, MarginOffsets};
use crate::error::{Error, Result};
use crate::losses::{calibrated_log, margins, rho_margin};
use crate::metrics::ConfusionMatrix;
use crate::raster::{LabelMask, ScoreMap};

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProbs {
    /// Class-k pixels predicted as something else.
    pub p_k0: Vec<f64>,
    /// Non-k pixels predicted as k.
    pub p_0k: Vec<f64>,
    pub p_k: Vec<f64>,
    pub n: u64,
}

impl ErrorProbs {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        if cm.total() == 0 {
            return Err(Error::Empty("confusion matrix has no pixels".into()));
        }
        let n = cm.total() as f64;
        let c = cm.classes();
        let diag = |k| cm.count(k, k);
        Ok(Self {
            p_k0: (0..c).map(|k| (cm.row_sum(k) - diag(k)) as f64 / n).collect(),
            p_0k: (0..c).map(|k| (cm.col_sum(k) - diag(k)) as f64 / n).collect(),
            p_k: (0..c).map(|k| cm.row_sum(k) as f64 / n).collect(),
            n: cm.total(),
        })
    }

    /// `(p_k - p_k0) / (p_k + p_0k)`, with 0/0 = 1.
    pub fn iou(&self, k: usize) -> f64 {
        let den = self.p_k[k] + self.p_0k[k];
        if den == 0.0 {
            1.0
        } else {
            (self.p_k[k] - self.p_k0[k]) / den
        }
    }
}

pub fn error_probs(cm: &ConfusionMatrix) -> Result<ErrorProbs> {
    ErrorProbs::from_confusion(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateVariant {
    RhoMargin,
    CalibratedLog,
}

/// Per-class surrogate upper bounds on `p_k0` and `p_0k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEll {
    pub ell_k0: Vec<f64>,
    pub ell_0k: Vec<f64>,
}

pub fn surrogate_ell(
    scores: &ScoreMap,
    gt: &LabelMask,
    offsets: &MarginOffsets,
    variant: SurrogateVariant,
) -> Result<SurrogateEll> {
    scores.check_pixels(gt)?;
    let c = scores.classes();
    if offsets.classes() != c {
        return Err(Error::ShapeMismatch(format!("offsets cover {} classes, scores have {c}", offsets.classes())));
    }
    if gt.is_empty() {
        return Err(Error::Empty("no pixels".into()));
    }
    let f = match variant {
        SurrogateVariant::RhoMargin => rho_margin,
        SurrogateVariant::CalibratedLog => calibrated_log,
    };
    let lambda = margins(scores)?;
    let (mut ell_k0, mut ell_0k) = (vec![0.0; c], vec![0.0; c]);
    for i in 0..gt.len() {
        let y = gt.label(i);
        for (k, &l) in lambda.pixel(i).iter().enumerate() {
            if k == y {
                ell_k0[k] += f(l, offsets.rho_k0[k]);
            } else {
                ell_0k[k] += f(-l, offsets.rho_0k[k]);
            }
        }
    }
    let n = gt.len() as f64;
    ell_k0.iter_mut().chain(ell_0k.iter_mut()).for_each(|v| *v /= n);
    Ok(SurrogateEll { ell_k0, ell_0k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouLowerBound {
    pub per_class: Vec<f64>,
    pub mean: f64,
    /// False where the denominator vanished (0/0 taken as 1) or the numerator is negative.
    pub valid: Vec<bool>,
}

pub fn iou_lower_bound(probs: &ErrorProbs, ell: &SurrogateEll) -> Result<IouLowerBound> {
    let c = probs.p_k.len();
    if ell.ell_k0.len() != c || ell.ell_0k.len() != c {
        return Err(Error::ShapeMismatch("surrogates and probabilities differ in class count".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut valid = Vec::with_capacity(c);
    for k in 0..c {
        let num = probs.p_k[k] - ell.ell_k0[k];
        let den = probs.p_k[k] + ell.ell_0k[k];
        if den <= 0.0 {
            per_class.push(1.0);
            valid.push(false);
        } else {
            per_class.push(num / den);
            valid.push(num >= 0.0);
        }
    }
    let mean = per_class.iter().sum::<f64>() / c as f64;
    Ok(IouLowerBound { per_class, mean, valid })
}

/// Confidence and complexity inputs of the error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    /// User proxy for the complexity term. Used as `F` directly unless
    /// `include_sigma` is set, in which case the confidence term is added.
    pub complexity: f64,
    pub eta: f64,
    pub pixels_per_image: u64,
    pub include_sigma: bool,
}

impl BoundConfig {
    pub fn new(complexity: f64, eta: f64, pixels_per_image: u64) -> Result<Self> {
        let bc = Self { complexity, eta, pixels_per_image, include_sigma: false };
        bc.validate()?;
        Ok(bc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.complexity > 0.0 && self.complexity.is_finite()) {
            return Err(Error::InvalidParameter(format!("F must be positive, got {}", self.complexity)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidParameter(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }

    /// `(rho_max / 4c) sqrt(2 m ln(2c / eta))`.
    pub fn sigma(&self, rho_max: f64, classes: usize) -> f64 {
        let c = classes as f64;
        rho_max / (4.0 * c) * (2.0 * self.pixels_per_image as f64 * (2.0 * c / self.eta).ln()).sqrt()
    }

    pub fn effective_f(&self, offsets: &MarginOffsets) -> f64 {
        if self.include_sigma {
            self.complexity + self.sigma(offsets.rho_max(), offsets.classes())
        } else {
            self.complexity
        }
    }
}

/// `epsilon_k` for one class, or `None` when the denominator is not positive.
pub fn epsilon_term(n: f64, n_k: f64, classes: usize, f: f64, rho_0k: f64, mu_k: f64) -> Option<f64> {
    let rest = (n - n_k).sqrt();
    let den = n_k * rho_0k / (4.0 * classes as f64 * f) - rest;
    (den > 0.0 && mu_k > 0.0).then(|| (rest + n_k.sqrt() / mu_k) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonReport {
    /// `NaN` where the class is vacuous.
    pub epsilon_k: Vec<f64>,
    pub valid: Vec<bool>,
    /// Mean over all classes; `None` if any class is vacuous.
    pub epsilon: Option<f64>,
    /// Mean over valid classes only; `None` if none is valid.
    pub epsilon_valid_only: Option<f64>,
    /// Every class vacuous.
    pub vacuous: bool,
    pub f: f64,
}

fn epsilon_with_f(stats: &ClassStats, rho_0k: &[f64], mu_k: &[f64], f: f64) -> EpsilonReport {
    let c = stats.classes();
    let n = stats.total as f64;
    let terms: Vec<Option<f64>> = (0..c)
        .map(|k| epsilon_term(n, stats.pixel_counts[k] as f64, c, f, rho_0k[k], mu_k[k]))
        .collect();
    let valid: Vec<bool> = terms.iter().map(Option::is_some).collect();
    let good: Vec<f64> = terms.iter().flatten().copied().collect();
    EpsilonReport {
        epsilon_k: terms.iter().map(|t| t.unwrap_or(f64::NAN)).collect(),
        epsilon: (good.len() == c).then(|| good.iter().sum::<f64>() / c as f64),
        epsilon_valid_only: (!good.is_empty()).then(|| good.iter().sum::<f64>() / good.len() as f64),
        vacuous: good.is_empty(),
        valid,
        f,
    }
}

pub fn epsilon_bound(stats: &ClassStats, offsets: &MarginOffsets, bc: &BoundConfig) -> Result<EpsilonReport> {
    bc.validate()?;
    if offsets.classes() != stats.classes() {
        return Err(Error::ShapeMismatch(format!(
            "offsets cover {} classes, statistics {}",
            offsets.classes(),
            stats.classes()
        )));
    }
    let report = epsilon_with_f(stats, &offsets.rho_0k, &offsets.mu_k, bc.effective_f(offsets));
    if report.vacuous {
        warn!("error bound is vacuous for every class (F = {})", report.f);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityVerdict {
    pub holds: bool,
    pub trials: usize,
    pub calibrated_epsilon: f64,
    /// Smallest `epsilon(perturbed) / epsilon(calibrated)` seen; infinite if
    /// every perturbation was vacuous, `None` with zero trials.
    pub worst_ratio: Option<f64>,
    pub worst_offsets: Option<Vec<f64>>,
}

/// Positive vector with the same sum as `base`.
fn perturb(base: &[f64], rng: &mut ChaCha8Rng, trial: usize) -> Vec<f64> {
    let sum: f64 = base.iter().sum();
    let raw: Vec<f64> = match trial % 4 {
        // Flat Dirichlet over the simplex.
        0 => base.iter().map(|_| Exp1.sample(rng)).collect(),
        // Log-normal jitter around the calibrated point at three scales.
        t => {
            let scale = [0.0, 1e-3, 0.05, 0.5][t];
            base.iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(rng);
                    b * (scale * z).exp()
                })
                .collect()
        }
    };
    let raw_sum: f64 = raw.iter().sum();
    raw.iter().map(|r| r / raw_sum * sum).collect()
}

/// Random search checking that the calibrated offset ratios minimise `epsilon`
/// among positive offset vectors with the same sum. `mu_k` and `F` are held at
/// their calibrated values; vacuous perturbations count as infinitely worse.
pub fn verify_optimality(
    stats: &ClassStats,
    config: &CalibConfig,
    bc: &BoundConfig,
    trials: usize,
    seed: u64,
) -> Result<OptimalityVerdict> {
    let offsets = compute_offsets(stats, config)?;
    let base = epsilon_bound(stats, &offsets, bc)?;
    let calibrated = base.epsilon.ok_or_else(|| {
        Error::InvalidParameter(format!(
            "calibrated offsets give a vacuous bound for classes {:?}; lower F or raise tau",
            base.valid.iter().enumerate().filter(|(_, v)| !**v).map(|(k, _)| k).collect::<Vec<_>>()
        ))
    })?;
    if trials == 0 {
        warn!("optimality check with zero trials is vacuously true");
        return Ok(OptimalityVerdict {
            holds: true,
            trials,
            calibrated_epsilon: calibrated,
            worst_ratio: None,
            worst_offsets: None,
        });
    }
    let mut worst_ratio = f64::INFINITY;
    let mut worst_offsets = None;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let candidate = perturb(&offsets.rho_0k, &mut rng, t);
        let eps = epsilon_with_f(stats, &candidate, &offsets.mu_k, base.f).epsilon.unwrap_or(f64::INFINITY);
        let ratio = eps / calibrated;
        if ratio < worst_ratio {
            worst_ratio = ratio;
            worst_offsets = Some(candidate);
        }
    }
    Ok(OptimalityVerdict {
        holds: worst_ratio >= 1.0 - 1e-9,
        trials,
        calibrated_epsilon: calibrated,
        worst_ratio: Some(worst_ratio),
        worst_offsets,
    })
}

/// Full audit of the bound for one dataset and offset choice.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub stats: ClassStats,
    pub offsets: MarginOffsets,
    pub epsilon: EpsilonReport,
    pub surrogate: Option<SurrogateEll>,
    pub iou_lower: Option<IouLowerBound>,
    pub optimality: Option<OptimalityVerdict>,
}

impl BoundReport {
    pub fn miou_lower(&self) -> Option<f64> {
        self.iou_lower.as_ref().map(|b| b.mean)
    }

    pub fn to_csv(&self) -> String {
        let c = self.stats.classes();
        let max_rho = self.offsets.rho_0k.iter().copied().fold(0.0, f64::max);
        let mut out = String::from("class,n_k,p_k,rho_0k,rho_k0,mu_k,rho_ratio_to_max,epsilon_k,vacuous");
        if self.surrogate.is_some() {
            out.push_str(",ell_k0,ell_0k,iou_lower,iou_lower_valid");
        }
        out.push('\n');
        let freqs = self.stats.frequencies();
        for k in 0..c {
            let _ = write!(
                out,
                "{k},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                self.stats.pixel_counts[k],
                freqs[k],
                self.offsets.rho_0k[k],
                self.offsets.rho_k0[k],
                self.offsets.mu_k[k],
                self.offsets.rho_0k[k] / max_rho,
                self.epsilon.epsilon_k[k],
                u8::from(!self.epsilon.valid[k]),
            );
            if let (Some(s), Some(b)) = (&self.surrogate, &self.iou_lower) {
                let _ = write!(
                    out,
                    ",{:.12e},{:.12e},{:.12e},{}",
                    s.ell_k0[k],
                    s.ell_0k[k],
                    b.per_class[k],
                    u8::from(b.valid[k])
                );
            }
            out.push('\n');
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.12e}"));
        let _ = writeln!(out, "summary,{},,,,,,{},{}", self.stats.total, fmt(self.epsilon.epsilon), u8::from(self.epsilon.vacuous));
        let _ = writeln!(out, "# F,{:.12e}", self.epsilon.f);
        let _ = writeln!(out, "# epsilon_valid_only,{}", fmt(self.epsilon.epsilon_valid_only));
        if let Some(m) = self.miou_lower() {
            let _ = writeln!(out, "# miou_lower,{m:.12e}");
        }
        if let Some(v) = &self.optimality {
            let _ = writeln!(
                out,
                "# optimality,holds={},trials={},worst_ratio={}",
                v.holds,
                v.trials,
                fmt(v.worst_ratio)
            );
        }
        out
    }
}
