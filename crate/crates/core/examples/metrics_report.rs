//! Scores a prediction against ground truth for the corroded class and
//! prints the report as a table and as CSV.

use useg::loss::PixelTargets;
use useg::metrics::{accumulate, ConfusionCounts, MetricsConfig, MetricsReport, CORRODED};

fn main() -> useg::Result<()> {
    // 1000 valid pixels: 40 corroded in truth, 30 of them missed, 8 false alarms
    let n = 1000;
    let truth: Vec<u8> = (0..n).map(|i| if i < 40 { 2 } else { 0 }).collect();
    let pred: Vec<u8> = (0..n)
        .map(|i| match i {
            0..=9 => 2,
            10..=39 => 0,
            40..=47 => 2,
            _ => 0,
        })
        .collect();
    let targets = PixelTargets::dense(1, 1, n, truth.clone())?;
    let cfg = MetricsConfig::default();
    let counts = accumulate(&pred, &targets, CORRODED, ConfusionCounts::default())?;
    let per_class: Vec<(u64, u64)> = (0..6u8)
        .map(|c| {
            let total = truth.iter().filter(|&&t| t == c).count() as u64;
            let ok = truth.iter().zip(&pred).filter(|(&t, &p)| t == c && p == c).count() as u64;
            (ok, total)
        })
        .collect();
    let report = MetricsReport::new(counts, &per_class, &cfg);
    println!("{counts:?}\n\n{report}\n");
    println!("{}\n{}", MetricsReport::CSV_HEADER, report.csv_row());
    Ok(())
}
