//! Cross-entropy vs margin-calibrated training without warm-up: per-epoch
//! train/validation curves and the normalized generalization gap.
//!
//! cargo run --release --example gap [epochs] [out_dir]

use std::path::PathBuf;

use margin_calib::experiment::{run_gap, write_gap, ExperimentSpec};
use margin_calib::trainer::{LossConfig, LossKind};

fn main() -> margin_calib::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |a| a.parse().expect("epoch count"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mcal-gap"));

    let mut spec = ExperimentSpec::desk_scale(vec![LossConfig::new(LossKind::Ce), LossConfig::new(LossKind::Mc)]);
    spec.train.epochs = epochs;
    spec.seeds = vec![0, 1, 2];

    let report = run_gap(&spec)?;
    for run in &report.runs {
        match run.final_gap() {
            Some(g) => println!("{} seed {}: final normalized gap {g:.4}", run.loss, run.seed),
            None => println!("{} seed {}: aborted", run.loss, run.seed),
        }
    }
    let (wins, total) = report.wins("mc", "ce");
    println!("mc gap <= ce gap in {wins}/{total} seeds");
    for path in write_gap(&report, &spec, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
