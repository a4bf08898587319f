//! Compares every loss's analytic gradient against central differences on a
//! random score map.
//!
//! cargo run --example gradcheck [pixels] [classes] [seed]

use margin_calib::calibration::{compute_offsets, CalibConfig, ClassStats};
use margin_calib::losses::{combine, BaselineParams, Loss, LossOp};
use margin_calib::raster::{LabelMask, ScoreMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> margin_calib::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let pixels = args.next().unwrap_or(32) as usize;
    let classes = args.next().unwrap_or(4) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(args.next().unwrap_or(7));

    let scores = ScoreMap::from_pixels(classes, (0..pixels * classes).map(|_| rng.random_range(-3.0..3.0)).collect())?;
    let gt = LabelMask::from_labels(classes, (0..pixels).map(|_| rng.random_range(0..classes) as u8).collect())?;
    let stats = ClassStats::from_counts(gt.class_counts().iter().map(|&n| n + 1).collect(), pixels as u64)?;
    let offsets = compute_offsets(&stats, &CalibConfig::default())?;

    let p = BaselineParams::default();
    let ops = [
        LossOp::CrossEntropy { class_weights: None },
        LossOp::Focal { gamma: p.focal_gamma },
        LossOp::Dice { smooth: p.dice_smooth },
        LossOp::Tversky { alpha: p.tversky_alpha, beta: p.tversky_beta, smooth: p.dice_smooth },
        LossOp::LovaszSoftmax,
        LossOp::MarginCalibrated(offsets.clone()),
        combine(LossOp::MarginCalibrated(offsets), LossOp::Dice { smooth: p.dice_smooth }, 0.5)?,
    ];

    let h = 1e-5;
    println!("loss,value,max_abs_err,max_rel_err");
    for op in &ops {
        let analytic = op.evaluate(&scores, &gt)?;
        let mut probe = scores.clone();
        let (mut abs_err, mut rel_err) = (0.0f64, 0.0f64);
        for j in 0..scores.data().len() {
            let x = probe.data()[j];
            probe.data_mut()[j] = x + h;
            let up = op.evaluate(&probe, &gt)?.value;
            probe.data_mut()[j] = x - h;
            let down = op.evaluate(&probe, &gt)?.value;
            probe.data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.gradient[j];
            abs_err = abs_err.max((a - numeric).abs());
            rel_err = rel_err.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
        println!("{},{:.6},{abs_err:.2e},{rel_err:.2e}", op.name(), analytic.value);
    }
    Ok(())
}
