//! Seeded synthetic segmentation data with a controllable class imbalance.
//!
//! Masks are class-0 backgrounds with axis-aligned rectangles and ellipses
//! of the other classes painted on top. Features are one-hot class
//! prototypes in the first `c` channels plus isotropic Gaussian noise on all
//! `d` channels.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): the generator is seeded
//! with `seed` and image `i` draws from stream `i`, so every image can be
//! reproduced independently of the others.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_mask, save_scores, write_manifest, LabelMask, ScoreMap};
use crate::trainer::Dataset;

/// Attempts per class and image before a target area is declared unreachable.
const MAX_SHAPES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub target_frequencies: Vec<f64>,
    pub noise_sigma: f64,
    pub feature_channels: usize,
}

impl Default for SynthSpec {
    /// The imbalanced three-class setting used by the bundled experiments.
    /// At `noise_sigma = 0.35` a linear cross-entropy model under the
    /// desk-scale protocol reaches a test mIoU of roughly 0.7.
    fn default() -> Self {
        Self {
            seed: 0,
            images: 300,
            height: 32,
            width: 32,
            classes: 3,
            target_frequencies: vec![0.89, 0.10, 0.01],
            noise_sigma: 0.35,
            feature_channels: 8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::InvalidParameter(format!("classes {} outside 2..=256", self.classes)));
        }
        if self.feature_channels < self.classes {
            return Err(Error::InvalidParameter(format!(
                "feature_channels {} < classes {}",
                self.feature_channels, self.classes
            )));
        }
        if self.images == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter("images, height and width must be positive".into()));
        }
        if self.target_frequencies.len() != self.classes {
            return Err(Error::InvalidParameter(format!(
                "{} target frequencies for {} classes",
                self.target_frequencies.len(),
                self.classes
            )));
        }
        if self.target_frequencies.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidParameter("target frequencies must be positive".into()));
        }
        let sum: f64 = self.target_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("target frequencies sum to {sum}, not 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Rounds `x` up with probability equal to its fractional part.
fn stochastic_round(x: f64, rng: &mut impl Rng) -> usize {
    let floor = x.floor();
    floor as usize + usize::from(rng.random::<f64>() < x - floor)
}

/// Paints `need` pixels of `class` over background, one random shape at a time.
fn paint_class(
    labels: &mut [u8],
    height: usize,
    width: usize,
    class: u8,
    need: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let free = labels.iter().filter(|&&l| l == 0).count();
    if need > free {
        return Err(Error::Infeasible(format!(
            "class {class} needs {need} pixels but only {free} background pixels remain"
        )));
    }
    let mut painted = 0;
    for _ in 0..MAX_SHAPES {
        if painted == need {
            return Ok(());
        }
        let remaining = (need - painted) as f64;
        let area = (rng.random_range(0.4..1.0) * remaining).max(1.0);
        let aspect = rng.random_range(0.5f64.ln()..2f64.ln()).exp();
        let half_h = 0.5 * (area / aspect).sqrt();
        let half_w = 0.5 * (area * aspect).sqrt();
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ellipse = rng.random::<bool>();
        // Ellipses of the same bounding box cover pi/4 of it; enlarge to keep the area.
        let grow = if ellipse { (4.0 / std::f64::consts::PI).sqrt() } else { 1.0 };
        let (hh, hw) = ((half_h * grow).max(0.5), (half_w * grow).max(0.5));
        let y0 = (cy - hh).floor().max(0.0) as usize;
        let y1 = ((cy + hh).ceil() as usize).min(height);
        let x0 = (cx - hw).floor().max(0.0) as usize;
        let x1 = ((cx + hw).ceil() as usize).min(width);
        'shape: for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / hh, (x as f64 + 0.5 - cx) / hw);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                let px = &mut labels[y * width + x];
                if inside && *px == 0 {
                    *px = class;
                    painted += 1;
                    if painted == need {
                        break 'shape;
                    }
                }
            }
        }
    }
    if painted == need {
        Ok(())
    } else {
        Err(Error::Infeasible(format!(
            "class {class}: placed {painted} of {need} pixels after {MAX_SHAPES} shapes"
        )))
    }
}

/// Generates image `index` of the dataset described by `spec`.
pub fn generate_image(spec: &SynthSpec, index: usize) -> Result<(ScoreMap, LabelMask)> {
    let (h, w, c, d) = (spec.height, spec.width, spec.classes, spec.feature_channels);
    let m = h * w;
    let mut rng = image_rng(spec.seed, index);
    let mut labels = vec![0u8; m];

    // Common foreground classes first so rare ones are not overwritten.
    let mut order: Vec<usize> = (1..c).collect();
    order.sort_by(|&a, &b| spec.target_frequencies[b].total_cmp(&spec.target_frequencies[a]).then(a.cmp(&b)));
    for k in order {
        let jitter = rng.random_range(0.5..1.5);
        let need = stochastic_round(spec.target_frequencies[k] * m as f64 * jitter, &mut rng);
        paint_class(&mut labels, h, w, k as u8, need, &mut rng)?;
    }

    let mut features = vec![0.0; m * d];
    for (px, &y) in features.chunks_exact_mut(d).zip(&labels) {
        for v in px.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = spec.noise_sigma * z;
        }
        px[y as usize] += 1.0;
    }
    Ok((ScoreMap::new(h, w, d, features)?, LabelMask::new(h, w, c, labels)?))
}

/// Generates the full dataset. Images are independent, so the result does
/// not depend on generation order.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (features, masks) = (0..spec.images).map(|i| generate_image(spec, i)).collect::<Result<(Vec<_>, Vec<_>)>>()?;
    let data = Dataset::new(features, masks)?;
    let counts = data.class_counts();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Infeasible(format!("class {k} never appears in {} images", spec.images)));
    }
    Ok(data)
}

/// Writes features (SCR1 with `c = d`), masks (MSK1), `manifest.tsv` and
/// `synth.json` into `dir`. Returns the manifest path.
pub fn save_dataset(data: &Dataset, spec: Option<&SynthSpec>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, (x, y)) in data.features().iter().zip(data.masks()).enumerate() {
        let fp = dir.join(format!("img{i:05}.scr"));
        let mp = dir.join(format!("img{i:05}.msk"));
        save_scores(x, &fp)?;
        save_mask(y, &mp)?;
        entries.push((fp, mp));
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    if let Some(spec) = spec {
        let path = dir.join("synth.json");
        let json = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sigma: f64) -> SynthSpec {
        SynthSpec { seed, images: 12, height: 16, width: 16, noise_sigma: sigma, ..Default::default() }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small(3, 0.5)).unwrap();
        let b = generate(&small(3, 0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(4, 0.5)).unwrap();
        assert_ne!(a, c);
        // Any single image can be regenerated on its own.
        let (x, y) = generate_image(&small(3, 0.5), 7).unwrap();
        assert_eq!(&x, &a.features()[7]);
        assert_eq!(&y, &a.masks()[7]);
    }

    #[test]
    fn noiseless_features_are_prototypes() {
        let data = generate(&small(1, 0.0)).unwrap();
        for (x, y) in data.features().iter().zip(data.masks()) {
            for i in 0..y.len() {
                let px = x.pixel(i);
                assert_eq!(crate::raster::argmax(px), y.label(i));
                assert_eq!(px.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn realized_frequencies_track_targets() {
        let spec = SynthSpec { images: 100, ..Default::default() };
        let data = generate(&spec).unwrap();
        let counts = data.class_counts();
        let total: u64 = counts.iter().sum();
        for (k, &n) in counts.iter().enumerate() {
            let f = n as f64 / total as f64;
            let target = spec.target_frequencies[k];
            assert!((f - target).abs() <= 0.2 * target, "class {k}: {f} vs {target}");
        }
    }

    #[test]
    fn infeasible_and_invalid_specs() {
        let mut spec = small(0, 0.1);
        spec.target_frequencies = vec![0.5, 0.3];
        assert!(matches!(generate(&spec), Err(Error::InvalidParameter(_))));
        spec.target_frequencies = vec![0.02, 0.49, 0.49];
        // With up to 1.5x jitter the two foreground classes cannot both fit.
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
        let spec = SynthSpec { feature_channels: 2, ..small(0, 0.1) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(9, 0.3);
        let data = generate(&spec).unwrap();
        let manifest = save_dataset(&data, Some(&spec), dir.path()).unwrap();
        let back = Dataset::load(&manifest).unwrap();
        // Features are stored as f32.
        assert_eq!(back.masks(), data.masks());
        for (a, b) in back.features().iter().zip(data.features()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (*x - *y as f32 as f64).abs() == 0.0));
        }
        assert_eq!(SynthSpec::load(dir.path().join("synth.json")).unwrap(), spec);
    }
}
