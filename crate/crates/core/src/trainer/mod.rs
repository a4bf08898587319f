//! Pixel classifiers trained with any of the crate's losses.
//!
//! Training is single-threaded and fully determined by the seed: the model
//! initialisation draws from `ChaCha8(seed)` and epoch `e` shuffles images
//! with stream `e` of a second generator.

mod model;
mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{Model, ModelKind};
pub use optim::{adamw_step, AdamWConfig, AdamWState};

use crate::calibration::{compute_offsets, CalibConfig, ClassStats};
use crate::error::{Error, Result};
use crate::losses::{combine, BaselineParams, Loss, LossOp};
use crate::metrics::ConfusionMatrix;
use crate::raster::{argmax_predict, load_scores, DatasetManifest, LabelMask, ScoreMap};

/// Per-image feature maps (`h x w x d`) with their label masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<ScoreMap>,
    masks: Vec<LabelMask>,
}

impl Dataset {
    pub fn new(features: Vec<ScoreMap>, masks: Vec<LabelMask>) -> Result<Self> {
        if features.len() != masks.len() {
            return Err(Error::ShapeMismatch(format!("{} feature maps for {} masks", features.len(), masks.len())));
        }
        let (Some(x0), Some(y0)) = (features.first(), masks.first()) else {
            return Err(Error::Empty("dataset has no images".into()));
        };
        let (d, c) = (x0.classes(), y0.classes());
        for (i, (x, y)) in features.iter().zip(&masks).enumerate() {
            if x.pixels() != y.len() || x.classes() != d || y.classes() != c {
                return Err(Error::ShapeMismatch(format!(
                    "image {i}: {} feature pixels (d={}) vs {} labels (c={}), expected d={d} c={c}",
                    x.pixels(),
                    x.classes(),
                    y.len(),
                    y.classes()
                )));
            }
        }
        Ok(Self { features, masks })
    }

    /// Loads a manifest whose first column points at feature files (SCR1, `c = d`).
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest)?;
        let masks = manifest.load_masks()?;
        let features = manifest.entries.iter().map(|(f, _)| load_scores(f)).collect::<Result<Vec<_>>>()?;
        Self::new(features, masks)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn features(&self) -> &[ScoreMap] {
        &self.features
    }

    pub fn masks(&self) -> &[LabelMask] {
        &self.masks
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].classes()
    }

    pub fn classes(&self) -> usize {
        self.masks[0].classes()
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes()];
        for m in &self.masks {
            for (a, b) in counts.iter_mut().zip(m.class_counts()) {
                *a += b;
            }
        }
        counts
    }

    pub fn stats(&self) -> Result<ClassStats> {
        ClassStats::from_masks(&self.masks)
    }

    /// Images `range`, in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::InvalidParameter(format!("slice {range:?} of {} images", self.len())));
        }
        Self::new(self.features[range.clone()].to_vec(), self.masks[range].to_vec())
    }

    /// Consecutive train / validation / test splits of the given sizes.
    pub fn split3(&self, train: usize, val: usize, test: usize) -> Result<(Self, Self, Self)> {
        if train + val + test > self.len() {
            return Err(Error::InvalidParameter(format!(
                "split {train}/{val}/{test} needs more than {} images",
                self.len()
            )));
        }
        Ok((self.slice(0..train)?, self.slice(train..train + val)?, self.slice(train + val..train + val + test)?))
    }

    /// Features and labels of `images` flattened into one pixel batch.
    fn batch(&self, images: &[usize]) -> Result<(Vec<f64>, LabelMask)> {
        let mut x = Vec::with_capacity(images.iter().map(|&i| self.features[i].data().len()).sum());
        for &i in images {
            x.extend_from_slice(self.features[i].data());
        }
        let masks: Vec<&LabelMask> = images.iter().map(|&i| &self.masks[i]).collect();
        Ok((x, LabelMask::concat(&masks)?))
    }
}

/// Loss names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Focal,
    Dice,
    Tversky,
    Lovasz,
    Mc,
    McDice,
    McTversky,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Ce,
        LossKind::Focal,
        LossKind::Dice,
        LossKind::Tversky,
        LossKind::Lovasz,
        LossKind::Mc,
        LossKind::McDice,
        LossKind::McTversky,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Dice => "dice",
            LossKind::Tversky => "tversky",
            LossKind::Lovasz => "lovasz",
            LossKind::Mc => "mc",
            LossKind::McDice => "mc+dice",
            LossKind::McTversky => "mc+tversky",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss {s:?}")))
    }
}

/// A loss selector plus every parameter it might need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub baseline: BaselineParams,
    pub calibration: CalibConfig,
    /// Weight of the margin-calibrated term in the `mc+*` combinations.
    pub combine_weight: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, baseline: BaselineParams::default(), calibration: CalibConfig::default(), combine_weight: 0.5 }
    }

    /// Instantiates the loss. Margin offsets come from `stats`, normally the
    /// training split's label counts.
    pub fn build(&self, stats: &ClassStats) -> Result<LossOp> {
        self.baseline.validate()?;
        let p = &self.baseline;
        let mc = || -> Result<LossOp> { Ok(LossOp::MarginCalibrated(compute_offsets(stats, &self.calibration)?)) };
        let dice = LossOp::Dice { smooth: p.dice_smooth };
        let tversky = LossOp::Tversky { alpha: p.tversky_alpha, beta: p.tversky_beta, smooth: p.dice_smooth };
        Ok(match self.kind {
            LossKind::Ce => LossOp::CrossEntropy { class_weights: p.class_weights.clone() },
            LossKind::Focal => LossOp::Focal { gamma: p.focal_gamma },
            LossKind::Dice => dice,
            LossKind::Tversky => tversky,
            LossKind::Lovasz => LossOp::LovaszSoftmax,
            LossKind::Mc => mc()?,
            LossKind::McDice => combine(mc()?, dice, self.combine_weight)?,
            LossKind::McTversky => combine(mc()?, tversky, self.combine_weight)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Hidden width for `mlp1`; ignored by linear models.
    pub hidden: usize,
    pub optimizer: AdamWConfig,
    pub batch_images: usize,
    pub epochs: usize,
    /// Cross-entropy epochs before switching to `loss`; `None` means 20% of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Linear,
            hidden: 16,
            optimizer: AdamWConfig::default(),
            batch_images: 1,
            epochs: 100,
            warmup_epochs: None,
            seed: 0,
            loss: LossConfig::new(LossKind::Ce),
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 5).min(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.calibration.validate()?;
        self.loss.baseline.validate()?;
        if self.batch_images == 0 {
            return Err(Error::InvalidParameter("batch_images must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.combine_weight) {
            return Err(Error::InvalidParameter(format!("combine weight {} outside [0, 1]", self.loss.combine_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Name of the loss optimised during this epoch.
    pub loss: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_miou: f64,
    pub val_miou: f64,
}

impl EpochRecord {
    /// `|val - train| / train` of the loss values.
    pub fn normalized_gap(&self) -> f64 {
        (self.val_loss - self.train_loss).abs() / self.train_loss
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_miou,val_miou,loss\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10},{:.10},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.train_miou, r.val_miou, r.loss
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Loss value and gradient with respect to the parameters for one batch.
pub fn backward(model: &Model, features: &[f64], gt: &LabelMask, loss: &LossOp) -> Result<(f64, Vec<f64>)> {
    let scores = model.forward(features)?;
    let res = loss.evaluate(&scores, gt)?;
    Ok((res.value, model.backward(features, &res.gradient)?))
}

/// Global confusion matrix of `model` over every pixel of `data`.
pub fn confusion(model: &Model, data: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(data.classes());
    for (x, y) in data.features.iter().zip(&data.masks) {
        let scores = model.forward(x.data())?;
        cm.accumulate_raw(y.data(), argmax_predict(&scores).data());
    }
    Ok(cm)
}

/// Mean batch loss over `data` in fixed order.
fn mean_loss(model: &Model, data: &Dataset, loss: &LossOp, batch_images: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_images) {
        let (x, y) = data.batch(chunk)?;
        total += loss.evaluate(&model.forward(&x)?, &y)?.value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn check_compatible(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.feature_dim() != val.feature_dim() || train.classes() != val.classes() {
        return Err(Error::ShapeMismatch("train and validation splits differ in d or c".into()));
    }
    Ok(())
}

/// Trains with the configured loss, building margin offsets from the training split.
pub fn train(train_data: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let target = config.loss.build(&train_data.stats()?)?;
    train_with(train_data, val, config, &target)
}

/// Trains with an explicit target loss; `config.loss` is ignored.
pub fn train_with(train_data: &Dataset, val: &Dataset, config: &TrainConfig, target: &LossOp) -> Result<(Model, TrainLog)> {
    config.validate()?;
    check_compatible(train_data, val)?;
    let mut model = Model::init(config.model, train_data.feature_dim(), config.hidden, train_data.classes(), config.seed)?;
    let mut state = AdamWState::new(model.params().len());
    let mut log = TrainLog::default();
    let warmup_loss = LossOp::CrossEntropy { class_weights: None };
    let warmup = config.warmup();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..config.epochs {
        let loss = if epoch < warmup { &warmup_loss } else { target };
        shuffler.set_stream(epoch as u64);
        shuffler.set_word_pos(0);
        order.sort_unstable();
        order.shuffle(&mut shuffler);
        for (batch, chunk) in order.chunks(config.batch_images).enumerate() {
            let (x, y) = train_data.batch(chunk)?;
            // Diverged weights surface as non-finite scores before the loss sees them.
            let (value, grads) = backward(&model, &x, &y, loss).map_err(|e| match e {
                Error::NonFinite(_) => Error::NumericAbort { epoch, batch },
                e => e,
            })?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericAbort { epoch, batch });
            }
            adamw_step(model.params_mut(), &grads, &config.optimizer, &mut state)?;
        }
        let record = EpochRecord {
            epoch,
            loss: loss.name(),
            train_loss: mean_loss(&model, train_data, loss, config.batch_images)?,
            val_loss: mean_loss(&model, val, loss, config.batch_images)?,
            train_miou: confusion(&model, train_data)?.report()?.miou,
            val_miou: confusion(&model, val)?.report()?.miou,
        };
        if !record.train_loss.is_finite() || !record.val_loss.is_finite() {
            return Err(Error::NumericAbort { epoch, batch: usize::MAX });
        }
        log::debug!(
            "epoch {epoch} [{}] train {:.5} val {:.5} miou {:.4}/{:.4}",
            record.loss,
            record.train_loss,
            record.val_loss,
            record.train_miou,
            record.val_miou
        );
        log.records.push(record);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn data(sigma: f64, images: usize) -> Dataset {
        generate(&SynthSpec { images, height: 12, width: 12, noise_sigma: sigma, target_frequencies: vec![0.7, 0.2, 0.1], ..Default::default() })
            .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let d = data(0.5, 4);
        let cfg = TrainConfig { epochs: 0, seed: 5, ..Default::default() };
        let (model, log) = train(&d, &d, &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(model, Model::init(ModelKind::Linear, 8, 16, 3, 5).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let d = data(0.8, 6);
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: Some(1),
            batch_images: 2,
            loss: LossConfig::new(LossKind::Mc),
            seed: 2,
            ..Default::default()
        };
        let a = train(&d, &d, &cfg).unwrap();
        let b = train(&d, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.records.len(), 3);
        assert_eq!(a.1.records[0].loss, "ce");
        assert_eq!(a.1.records[2].loss, "mc");
    }

    #[test]
    fn full_warmup_is_pure_cross_entropy() {
        let d = data(0.8, 6);
        let base = TrainConfig { epochs: 4, warmup_epochs: Some(4), ..Default::default() };
        let with_mc = TrainConfig { loss: LossConfig::new(LossKind::McDice), ..base.clone() };
        let ce = TrainConfig { warmup_epochs: Some(0), ..base };
        assert_eq!(train(&d, &d, &with_mc).unwrap(), train(&d, &d, &ce).unwrap());
    }

    #[test]
    fn noiseless_data_is_learned() {
        let d = data(0.0, 20);
        let cfg = TrainConfig { epochs: 50, optimizer: AdamWConfig { learning_rate: 1e-2, ..Default::default() }, ..Default::default() };
        let (_, log) = train(&d, &d, &cfg).unwrap();
        assert!(log.last().unwrap().val_miou >= 0.99, "{:?}", log.last());
    }

    #[test]
    fn nonfinite_loss_aborts_with_location() {
        let d = data(0.5, 3);
        let bad = LossOp::CrossEntropy { class_weights: Some(vec![f64::INFINITY, 1.0, 1.0]) };
        let cfg = TrainConfig { epochs: 2, warmup_epochs: Some(0), ..Default::default() };
        assert!(matches!(train_with(&d, &d, &cfg, &bad), Err(Error::NumericAbort { epoch: 0, batch: 0 })));
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
