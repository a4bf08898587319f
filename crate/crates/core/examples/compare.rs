//! Trains every loss over several seeds on the desk-scale synthetic split
//! and writes the comparison tables.
//!
//! cargo run --release --example compare [epochs] [out_dir]

use std::path::PathBuf;

use margin_calib::experiment::{run_compare, write_compare, ExperimentSpec};
use margin_calib::trainer::{LossConfig, LossKind};

fn main() -> margin_calib::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(20, |a| a.parse().expect("epoch count"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mcal-compare"));

    let mut spec = ExperimentSpec::desk_scale(LossKind::ALL.into_iter().map(LossConfig::new).collect());
    spec.train.epochs = epochs;
    spec.train.warmup_epochs = Some(epochs / 5);
    spec.seeds = vec![0, 1];

    let report = run_compare(&spec)?;
    print!("{}", report.summary_csv());
    for path in write_compare(&report, &spec, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
