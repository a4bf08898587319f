//! Generates the imbalanced synthetic dataset and writes it in the on-disk
//! formats the CLI reads.
//!
//! cargo run --example synth [out_dir]

use std::path::PathBuf;

use margin_calib::calibration::class_stats;
use margin_calib::raster::DatasetManifest;
use margin_calib::synth::{generate, generate_image, save_dataset, SynthSpec};

fn main() -> margin_calib::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mcal-synth"));
    let spec = SynthSpec { images: 40, ..Default::default() };
    let data = generate(&spec)?;

    let counts = data.class_counts();
    let total: u64 = counts.iter().sum();
    println!("class,target,realized");
    for (k, n) in counts.iter().enumerate() {
        println!("{k},{:.3},{:.4}", spec.target_frequencies[k], *n as f64 / total as f64);
    }

    // Any image can be regenerated on its own from (seed, index).
    let (x, y) = generate_image(&spec, 17)?;
    assert_eq!((&x, &y), (&data.features()[17], &data.masks()[17]));

    // One row of image 0's mask, as class digits.
    let mask = &data.masks()[0];
    let row: String = (0..mask.width()).map(|j| char::from(b'0' + mask.label(12 * mask.width() + j) as u8)).collect();
    println!("image 0, row 12: {row}");

    let manifest = save_dataset(&data, Some(&spec), &out)?;
    let stats = class_stats(&DatasetManifest::load(&manifest)?)?;
    println!("wrote {} ({} pixels, counts {:?})", manifest.display(), stats.total, stats.pixel_counts);
    Ok(())
}
