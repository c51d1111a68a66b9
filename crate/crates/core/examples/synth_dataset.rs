//! Renders the default synthetic dataset (38 train / 32 test scenes) into
//! a directory and prints the realized class balance.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir]
//! ```

use useg::data::{build_dataset, save_dataset, SynthConfig};

fn main() -> useg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("useg-synth").display().to_string());
    let cfg = SynthConfig::default();
    let (train, test) = build_dataset(&cfg, 38, 32)?;
    save_dataset(&out, &cfg.taxonomy.names, &train, &test)?;

    let classes = cfg.classes();
    let mut hist = vec![0u64; classes];
    let mut total = 0u64;
    for s in train.iter().chain(&test) {
        for (h, c) in hist.iter_mut().zip(s.class_histogram(classes)) {
            *h += c;
        }
        total += (s.height() * s.width()) as u64;
    }
    println!("wrote {} scenes to {out}", train.len() + test.len());
    println!("{:<12} {:>8} {:>8}", "class", "target", "actual");
    for (c, name) in cfg.taxonomy.names.iter().enumerate() {
        println!(
            "{name:<12} {:>7.1}% {:>7.1}%",
            100.0 * cfg.target_fractions[c],
            100.0 * hist[c] as f64 / total as f64
        );
    }
    let valid: u64 = hist.iter().sum();
    println!("{:<12} {:>7.1}% {:>7.1}%", "occluded", 100.0 * cfg.invalid_fraction(), 100.0 * (total - valid) as f64 / total as f64);
    Ok(())
}
