//! One-vs-rest confusion counts for a target class and the metrics derived
//! from them: Dice, sensitivity, specificity and alpha-weighted total error.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::{network_input, LabeledSample};
use crate::loss::PixelTargets;
use crate::model::UNet;

/// Default target class index (corroded) in the inspection taxonomy.
pub const CORRODED: usize = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub total_valid: u64,
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
            total_valid: self.total_valid + o.total_valid,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub target_class: usize,
    /// Cost of a miss relative to a false alarm in the total error.
    pub alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            target_class: CORRODED,
            alpha: 10.0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.target_class >= classes {
            return Err(Error::InvalidArgument {
                arg: "target_class",
                reason: format!("{} out of range for {classes} classes", self.target_class),
            });
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "alpha",
                reason: format!("must be positive, got {}", self.alpha),
            });
        }
        Ok(())
    }
}

/// Adds one-vs-rest tallies of `pred` against the valid pixels of `truth`.
pub fn accumulate(
    pred: &[u8],
    truth: &PixelTargets,
    target_class: usize,
    counts: ConfusionCounts,
) -> Result<ConfusionCounts> {
    if pred.len() != truth.labels.len() {
        return Err(Error::dims(format!(
            "{} predictions for {} target pixels",
            pred.len(),
            truth.labels.len()
        )));
    }
    let mut c = counts;
    for ((&p, &t), &valid) in pred.iter().zip(&truth.labels).zip(&truth.valid) {
        if !valid {
            continue;
        }
        let (p, t) = (p as usize == target_class, t as usize == target_class);
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
        c.total_valid += 1;
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, name: &'static str) -> Result<f64> {
    if den == 0 {
        Err(Error::UndefinedMetric(name))
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// `2TP / (2TP + FP + FN)`.
pub fn dsc(c: &ConfusionCounts) -> Result<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "DSC")
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fn_, "sensitivity")
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tn, c.tn + c.fp, "specificity")
}

/// `alpha/(alpha+1) * FN + 1/(alpha+1) * FP`, with FN and FP expressed as
/// fractions of all valid pixels.
pub fn total_error(c: &ConfusionCounts, config: &MetricsConfig) -> Result<f64> {
    if c.total_valid == 0 {
        return Err(Error::UndefinedMetric("total error"));
    }
    let n = c.total_valid as f64;
    let a = config.alpha;
    Ok(a / (a + 1.0) * (c.fn_ as f64 / n) + 1.0 / (a + 1.0) * (c.fp as f64 / n))
}

/// Per-pixel argmax over the channel axis of `batch x C x H x W` scores.
/// Ties resolve to the lowest class index.
pub fn argmax_labels(scores: &crate::tensor::Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = scores.dims4()?;
    if c > 256 {
        return Err(Error::dims(format!("{c} classes do not fit in u8 labels")));
    }
    let hw = h * w;
    let s = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if s[base + ch * hw + p] > s[base + best * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// All four metrics for the target class plus per-class pixel accuracy.
/// Metrics with a zero denominator are `None` and print as `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target_class: usize,
    pub alpha: f64,
    pub counts: ConfusionCounts,
    pub dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub total_error: Option<f64>,
    /// Fraction of valid pixels of each true class predicted correctly.
    pub class_accuracy: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Builds a report from target-class counts and per-class
    /// `(correct, total)` tallies.
    pub fn new(counts: ConfusionCounts, per_class: &[(u64, u64)], config: &MetricsConfig) -> Self {
        MetricsReport {
            target_class: config.target_class,
            alpha: config.alpha,
            counts,
            dsc: dsc(&counts).ok(),
            sensitivity: sensitivity(&counts).ok(),
            specificity: specificity(&counts).ok(),
            total_error: total_error(&counts, config).ok(),
            class_accuracy: per_class
                .iter()
                .map(|&(ok, total)| ratio(ok, total, "accuracy").ok())
                .collect(),
        }
    }

    pub const CSV_HEADER: &'static str =
        "target_class,alpha,dsc,sensitivity,specificity,total_error,tp,fp,tn,fn,total_valid";

    /// Single CSV row matching [`MetricsReport::CSV_HEADER`]; fractions, not
    /// percentages.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"));
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.target_class,
            self.alpha,
            f(self.dsc),
            f(self.sensitivity),
            f(self.specificity),
            f(self.total_error),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            c.total_valid
        )
    }
}

/// Formats a fraction as a percentage with one decimal.
pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}", "metric", "value (%)")?;
        writeln!(f, "{:<14}{:>10}", "DSC", percent(self.dsc))?;
        writeln!(f, "{:<14}{:>10}", "Sensitivity", percent(self.sensitivity))?;
        writeln!(f, "{:<14}{:>10}", "Specificity", percent(self.specificity))?;
        write!(f, "{:<14}{:>10}", "Total Error", percent(self.total_error))
    }
}

/// Tallies `(correct, total)` per true class over valid pixels.
pub fn class_tallies(pred: &[u8], truth: &PixelTargets, tallies: &mut [(u64, u64)]) {
    for ((&p, &t), &valid) in pred.iter().zip(&truth.labels).zip(&truth.valid) {
        if let (true, Some(slot)) = (valid, tallies.get_mut(t as usize)) {
            slot.1 += 1;
            if p == t {
                slot.0 += 1;
            }
        }
    }
}

/// Runs `model` in eval mode over `samples` and pools counts across all of
/// them before computing any metric.
pub fn evaluate(model: &UNet, samples: &[LabeledSample], config: &MetricsConfig) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.config().num_classes;
    config.validate(classes)?;
    let mut counts = ConfusionCounts::default();
    let mut tallies = vec![(0u64, 0u64); classes];
    for s in samples {
        let logits = model.forward_eval(&network_input(&s.image))?;
        let pred = argmax_labels(&logits)?;
        counts = accumulate(&pred, &s.targets, config.target_class, counts)?;
        class_tallies(&pred, &s.targets, &mut tallies);
    }
    Ok(MetricsReport::new(counts, &tallies, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts {
            tp,
            fp,
            tn,
            fn_,
            total_valid: tp + fp + tn + fn_,
        }
    }

    #[test]
    fn worked_metric_values() {
        assert!((dsc(&counts(2, 1, 0, 1)).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(sensitivity(&counts(3, 0, 0, 1)).unwrap(), 0.75);
        assert_eq!(specificity(&counts(0, 3, 97, 0)).unwrap(), 0.97);
    }

    #[test]
    fn total_error_worked_example() {
        let c = ConfusionCounts {
            tp: 62,
            fp: 8,
            tn: 900,
            fn_: 30,
            total_valid: 1000,
        };
        let te = total_error(&c, &MetricsConfig::default()).unwrap();
        let expected = 10.0 / 11.0 * 0.030 + 1.0 / 11.0 * 0.008;
        assert_eq!(te, expected);
        assert!((te - 0.028).abs() < 1e-15);
        assert_eq!(total_error(&counts(5, 0, 5, 0), &MetricsConfig::default()).unwrap(), 0.0);
        let sym = MetricsConfig {
            alpha: 1.0,
            ..Default::default()
        };
        let c = counts(10, 7, 76, 7);
        assert!((total_error(&c, &sym).unwrap() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn undefined_metrics_are_errors() {
        let empty = ConfusionCounts::default();
        assert!(matches!(dsc(&empty), Err(Error::UndefinedMetric("DSC"))));
        assert!(sensitivity(&counts(0, 4, 4, 0)).is_err());
        assert!(specificity(&counts(4, 0, 0, 4)).is_err());
        assert!(total_error(&empty, &MetricsConfig::default()).is_err());
        let r = MetricsReport::new(counts(0, 0, 5, 0), &[], &MetricsConfig::default());
        assert_eq!(r.dsc, None);
        assert!(r.csv_row().contains("undefined"));
    }

    #[test]
    fn perfect_and_complementary_predictions() {
        let labels = vec![2, 0, 2, 1, 2, 0];
        let t = PixelTargets::new(1, 2, 3, labels.clone(), vec![true, true, true, true, false, true]).unwrap();
        let c = accumulate(&labels, &t, 2, ConfusionCounts::default()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, tn: 3, fn_: 0, total_valid: 5 });

        let truth = vec![1, 0, 0, 1];
        let t = PixelTargets::dense(1, 2, 2, truth.clone()).unwrap();
        let flipped: Vec<u8> = truth.iter().map(|v| 1 - v).collect();
        let c = accumulate(&flipped, &t, 1, ConfusionCounts::default()).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(accumulate(&flipped[..3], &t, 1, c).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let s = crate::tensor::Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
        assert_eq!(argmax_labels(&s).unwrap(), vec![0, 1]);
    }

    #[test]
    fn display_uses_percent_with_one_decimal() {
        let r = MetricsReport::new(counts(1, 1, 97, 1), &[], &MetricsConfig::default());
        let text = r.to_string();
        assert!(text.contains("50.0"), "{text}");
        assert!(text.contains("99.0"), "{text}");
        assert_eq!(
            r.csv_row().split(',').count(),
            MetricsReport::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn evaluate_pools_counts_over_samples() {
        use crate::data::{generate_scene, SynthConfig};
        use crate::model::{UNet, UNetConfig};
        use crate::tensor::Mode;

        let cfg = UNetConfig {
            base_features: 2,
            depth: 2,
            ..Default::default()
        };
        let mut model = UNet::new(cfg, 1).unwrap();
        let scene = |seed| {
            generate_scene(&SynthConfig {
                height: 16,
                width: 16,
                seed,
                ..Default::default()
            })
            .unwrap()
        };
        let samples = vec![scene(1), scene(2)];
        let mc = MetricsConfig::default();
        assert!(matches!(evaluate(&model, &samples, &mc), Err(Error::UninitializedRunningStats)));
        model.forward(&network_input(&samples[0].image), Mode::Train).unwrap();
        assert!(matches!(evaluate(&model, &[], &mc), Err(Error::EmptyDataset)));

        let report = evaluate(&model, &samples, &mc).unwrap();
        let mut manual = ConfusionCounts::default();
        for s in &samples {
            let pred = argmax_labels(&model.forward_eval(&network_input(&s.image)).unwrap()).unwrap();
            manual = accumulate(&pred, &s.targets, CORRODED, manual).unwrap();
        }
        assert_eq!(report.counts, manual);
        let valid: usize = samples.iter().map(|s| s.targets.valid_count()).sum();
        assert_eq!(report.counts.total_valid, valid as u64);
    }
}
