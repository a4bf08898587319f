//! Trains a linear pixel classifier with cross-entropy and with the
//! margin-calibrated loss and prints their learning curves.
//!
//! cargo run --release --example train [epochs]

use margin_calib::synth::{generate, SynthSpec};
use margin_calib::trainer::{confusion, train, LossConfig, LossKind, TrainConfig};

fn main() -> margin_calib::Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epoch count"));
    let data = generate(&SynthSpec { images: 120, ..Default::default() })?;
    let (tr, va, te) = data.split3(80, 20, 20)?;

    for kind in [LossKind::Ce, LossKind::Mc] {
        let cfg = TrainConfig { epochs, loss: LossConfig::new(kind), ..Default::default() };
        let (model, log) = train(&tr, &va, &cfg)?;
        println!("== {kind} ({} warm-up epochs of ce)", cfg.warmup());
        for r in log.records.iter().step_by((epochs / 6).max(1)) {
            println!(
                "epoch {:>3} [{}] train loss {:.4} val loss {:.4} val mIoU {:.4}",
                r.epoch, r.loss, r.train_loss, r.val_loss, r.val_miou
            );
        }
        let report = confusion(&model, &te)?.report()?;
        println!("test mIoU {:.4}, per-class IoU {:.3?}", report.miou, report.per_class_iou);
    }
    Ok(())
}
