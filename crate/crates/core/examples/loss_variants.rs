//! Trains loss variants on the default synthetic dataset and prints a
//! seed-averaged comparison table.
//!
//! ```text
//! cargo run --release --example loss_variants -- [paper|core|focal|sweep] [epochs] [seeds]
//! ```

use useg::data::{build_dataset, SynthConfig};
use useg::loss::{LossConfig, INSPECTION_WEIGHTS};
use useg::metrics::{percent, CORRODED};
use useg::model::UNetConfig;
use useg::optim::{paper_variants, run_variant_suite_with, weight_sweep, SuiteSpec, TrainConfig};

fn main() -> useg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("core");
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let seeds = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3u64);

    let weights = INSPECTION_WEIGHTS.to_vec();
    let variants = match mode {
        "paper" => paper_variants(&weights),
        "sweep" => weight_sweep(&LossConfig::weighted_sce(weights), CORRODED)?,
        "focal" => vec![LossConfig::sce(), LossConfig::focal(2.0)],
        _ => vec![
            LossConfig::sce(),
            LossConfig::weighted_sce(weights.clone()),
            LossConfig::focal(2.0),
            LossConfig::weighted_focal(2.0, weights),
        ],
    };
    let (train, test) = build_dataset(&SynthConfig::default(), 38, 32)?;
    let base = TrainConfig {
        max_epochs: epochs,
        eval_every: 5,
        early_stop_patience: 1000,
        ..Default::default()
    };
    let spec = SuiteSpec::new(UNetConfig::default(), base, variants, (0..seeds).collect());
    let table = run_variant_suite_with(&spec, &train, &test, |label, seed, r| {
        println!(
            "{label:<18} seed {seed}: dsc {} sens {} spec {}",
            percent(r.dsc),
            percent(r.sensitivity),
            percent(r.specificity)
        );
    })?;
    println!("\n{table}");
    Ok(())
}
