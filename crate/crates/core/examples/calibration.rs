//! Per-class margin offsets from label statistics.
//!
//! cargo run --example calibration [tau] [upsilon]

use margin_calib::calibration::{compute_offsets, min_upsilon, CalibConfig, ClassStats};

fn main() -> margin_calib::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let config = CalibConfig::new(args.next().unwrap_or(10.0), args.next().unwrap_or(1.0))?;

    // Two classes, 90 / 10 pixels: the rare class gets a 27x larger offset.
    let stats = ClassStats::from_counts(vec![90, 10], 100)?;
    let offsets = compute_offsets(&stats, &config)?;
    println!("[90, 10] pixels:");
    print!("{}", offsets.to_text());
    println!("rho_01 / rho_02 = {:.6} (1/27 = {:.6})\n", offsets.rho_0k[0] / offsets.rho_0k[1], 1.0 / 27.0);

    // A skewed five-class distribution, as in street-scene data.
    let stats = ClassStats::from_counts(vec![600_000, 250_000, 100_000, 40_000, 10_000], 10_000)?;
    let offsets = compute_offsets(&stats, &config)?;
    println!("five classes, frequencies {:?}:", stats.frequencies());
    println!("class,n_k,rho_0k,rho_k0,mu_k,min_upsilon");
    for k in 0..stats.classes() {
        println!(
            "{k},{},{:.4},{:.4e},{:.4e},{:.3e}",
            stats.pixel_counts[k],
            offsets.rho_0k[k],
            offsets.rho_k0[k],
            offsets.mu_k[k],
            min_upsilon(&stats, k)
        );
    }
    let mean = offsets.rho_0k.iter().sum::<f64>() / stats.classes() as f64;
    println!("mean rho_0k = {mean:.4} (tau = {})", config.tau);
    Ok(())
}
