//! Error bound, optimality audit and empirical IoU lower bounds for a
//! trained model on synthetic data.
//!
//! cargo run --release --example bounds

use margin_calib::bounds::BoundConfig;
use margin_calib::calibration::CalibConfig;
use margin_calib::experiment::{run_bound, BoundSpec};
use margin_calib::raster::{LabelMask, ScoreMap};
use margin_calib::synth::{generate, SynthSpec};
use margin_calib::trainer::{train, TrainConfig};

fn main() -> margin_calib::Result<()> {
    let data = generate(&SynthSpec { images: 60, ..Default::default() })?;
    let (tr, va, _) = data.split3(40, 10, 10)?;
    let stats = tr.stats()?;

    // A short cross-entropy fit whose scores feed the empirical lower bounds.
    let cfg = TrainConfig { epochs: 10, ..Default::default() };
    let (model, _) = train(&tr, &va, &cfg)?;
    let scores = tr.features().iter().map(|x| model.forward(x.data())).collect::<margin_calib::Result<Vec<_>>>()?;
    let scores = ScoreMap::concat(&scores.iter().collect::<Vec<_>>())?;
    let gt = LabelMask::concat(&tr.masks().iter().collect::<Vec<_>>())?;

    let spec = BoundSpec {
        calibration: CalibConfig::default(),
        bound: BoundConfig::new(1.0, 0.05, stats.pixels_per_image)?,
        trials: 400,
        seed: 0,
    };
    let report = run_bound(&stats, &spec, Some((&scores, &gt)))?;
    print!("{}", report.to_csv());
    if let Some(v) = &report.optimality {
        println!(
            "calibrated epsilon {:.6}; best of {} perturbations is {:.6}x worse (holds: {})",
            v.calibrated_epsilon,
            v.trials,
            v.worst_ratio.unwrap_or(f64::INFINITY),
            v.holds
        );
    }

    // A large complexity term makes every class vacuous; this is flagged, not an error.
    let vacuous = BoundSpec { bound: BoundConfig::new(1e9, 0.05, stats.pixels_per_image)?, ..spec };
    let report = run_bound(&stats, &vacuous, None)?;
    println!("F = 1e9: vacuous = {}", report.epsilon.vacuous);
    Ok(())
}
