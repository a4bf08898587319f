//! Confusion matrix, per-class IoU and mIoU for a hand-written 4x4 example.
//!
//! cargo run --example metrics

use margin_calib::bounds::error_probs;
use margin_calib::metrics::ConfusionMatrix;
use margin_calib::raster::{LabelMask, PredMask};

fn main() -> margin_calib::Result<()> {
    #[rustfmt::skip]
    let gt = LabelMask::new(4, 4, 3, vec![
        0, 0, 1, 1,
        0, 0, 1, 1,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ])?;
    #[rustfmt::skip]
    let pred = PredMask::new(LabelMask::new(4, 4, 3, vec![
        0, 1, 1, 1,
        0, 0, 0, 1,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ])?);

    // Streaming: accumulate image by image, then read off the report.
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&gt, &pred)?;
    let report = cm.report()?;
    print!("{}", report.to_csv());

    // Class 2 is neither labelled nor predicted, so its IoU is 0/0 = 1.
    // `miou_present` averages over classes that do occur instead.
    println!("mIoU over all classes: {:.4}", report.miou);
    println!("mIoU over present classes: {:.4}", report.miou_present());

    // The same IoUs through error probabilities: (p_k - p_k0) / (p_k + p_0k).
    let probs = error_probs(&cm)?;
    for k in 0..3 {
        println!(
            "class {k}: p_k {:.4} p_k0 {:.4} p_0k {:.4} IoU {:.4}",
            probs.p_k[k],
            probs.p_k0[k],
            probs.p_0k[k],
            probs.iou(k)
        );
    }
    Ok(())
}
