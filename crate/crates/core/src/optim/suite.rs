use std::fmt;

use super::train::train;
use super::TrainConfig;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, INSPECTION_WEIGHTS};
use crate::metrics::{evaluate, percent, MetricsReport};
use crate::model::{UNet, UNetConfig};

/// Multipliers applied to the target-class weight in sweep mode.
pub const SWEEP_MULTIPLIERS: [f64; 4] = [0.25, 1.0, 4.0, 8.0];

/// SCE, W-SCE, Focal and W-Focal at gamma 0.5, 1 and 2, with `weights`
/// for the weighted kinds.
pub fn paper_variants(weights: &[f64]) -> Vec<LossConfig> {
    let mut v = vec![LossConfig::sce(), LossConfig::weighted_sce(weights.to_vec())];
    for g in [0.5, 1.0, 2.0] {
        v.push(LossConfig::focal(g));
    }
    for g in [0.5, 1.0, 2.0] {
        v.push(LossConfig::weighted_focal(g, weights.to_vec()));
    }
    v
}

/// Copies of `base` differing only in the weight of `target_class`, scaled
/// by each of [`SWEEP_MULTIPLIERS`].
pub fn weight_sweep(base: &LossConfig, target_class: usize) -> Result<Vec<LossConfig>> {
    if !base.kind.is_weighted() || target_class >= base.class_weights.len() {
        return Err(Error::InvalidArgument {
            arg: "weight_sweep",
            reason: format!("needs a weighted loss with a weight for class {target_class}"),
        });
    }
    Ok(SWEEP_MULTIPLIERS
        .iter()
        .map(|m| {
            let mut l = base.clone();
            l.class_weights[target_class] *= m;
            l
        })
        .collect())
}

/// Everything one comparison needs besides the data.
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub model: UNetConfig,
    pub base: TrainConfig,
    pub variants: Vec<LossConfig>,
    /// Every variant is trained once per seed; the seed drives both weight
    /// initialization and the training stream.
    pub seeds: Vec<u64>,
}

impl SuiteSpec {
    pub fn new(model: UNetConfig, base: TrainConfig, variants: Vec<LossConfig>, seeds: Vec<u64>) -> Self {
        SuiteSpec {
            model,
            base,
            variants,
            seeds,
        }
    }

    pub fn paper(model: UNetConfig, base: TrainConfig, seeds: Vec<u64>) -> Self {
        Self::new(model, base, paper_variants(&INSPECTION_WEIGHTS), seeds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub label: String,
    pub loss: LossConfig,
    pub per_seed: Vec<MetricsReport>,
    pub best_epochs: Vec<usize>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl SuiteRow {
    /// Seed-averaged metrics; undefined values are skipped.
    pub fn mean_dsc(&self) -> Option<f64> {
        mean(self.per_seed.iter().map(|r| r.dsc))
    }

    pub fn mean_sensitivity(&self) -> Option<f64> {
        mean(self.per_seed.iter().map(|r| r.sensitivity))
    }

    pub fn mean_specificity(&self) -> Option<f64> {
        mean(self.per_seed.iter().map(|r| r.specificity))
    }

    pub fn mean_total_error(&self) -> Option<f64> {
        mean(self.per_seed.iter().map(|r| r.total_error))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<SuiteRow>,
}

impl ComparisonTable {
    pub const CSV_HEADER: &'static str = "variant,seeds,dsc,sensitivity,specificity,total_error";

    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Seed-averaged fractions, one line per variant.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x}"));
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{}\n",
                r.label,
                r.per_seed.len(),
                f(r.mean_dsc()),
                f(r.mean_sensitivity()),
                f(r.mean_specificity()),
                f(r.mean_total_error())
            );
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(7);
        writeln!(
            f,
            "{:<width$}  {:>7}  {:>11}  {:>11}  {:>11}",
            "Variant", "DSC", "Sensitivity", "Specificity", "Total Error"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>11}  {:>11}  {:>11}",
                r.label,
                percent(r.mean_dsc()),
                percent(r.mean_sensitivity()),
                percent(r.mean_specificity()),
                percent(r.mean_total_error())
            )?;
        }
        Ok(())
    }
}

/// `W-SCE(w=10)`-style label naming the target-class weight of weighted
/// variants.
pub fn variant_label(loss: &LossConfig, target_class: usize) -> String {
    match loss.class_weights.get(target_class) {
        Some(w) if loss.kind.is_weighted() => format!("{}(w={w})", loss.name()),
        _ => loss.name(),
    }
}

/// Trains every variant from the same seeds and data and evaluates the best
/// checkpoint of each run on `eval_set`.
pub fn run_variant_suite(
    spec: &SuiteSpec,
    train_set: &[LabeledSample],
    eval_set: &[LabeledSample],
) -> Result<ComparisonTable> {
    run_variant_suite_with(spec, train_set, eval_set, |_, _, _| {})
}

/// [`run_variant_suite`] with a callback after each finished run.
pub fn run_variant_suite_with(
    spec: &SuiteSpec,
    train_set: &[LabeledSample],
    eval_set: &[LabeledSample],
    mut on_run: impl FnMut(&str, u64, &MetricsReport),
) -> Result<ComparisonTable> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "variants",
            reason: "need at least one variant and one seed".into(),
        });
    }
    let target = spec.base.metrics.target_class;
    let mut rows = Vec::with_capacity(spec.variants.len());
    for loss in &spec.variants {
        let label = variant_label(loss, target);
        let mut row = SuiteRow {
            label: label.clone(),
            loss: loss.clone(),
            per_seed: Vec::new(),
            best_epochs: Vec::new(),
        };
        for &seed in &spec.seeds {
            let cfg = TrainConfig {
                loss: loss.clone(),
                seed,
                ..spec.base.clone()
            };
            let model = UNet::new(spec.model.clone(), seed)?;
            let (best, _) = train(model, train_set, eval_set, &cfg)?;
            let report = evaluate(&best.to_model()?, eval_set, &cfg.metrics)?;
            on_run(&label, seed, &report);
            row.per_seed.push(report);
            row.best_epochs.push(best.epoch);
        }
        rows.push(row);
    }
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, AugmentConfig, SynthConfig};
    use crate::loss::LossKind;

    #[test]
    fn eight_paper_variants() {
        let v = paper_variants(&INSPECTION_WEIGHTS);
        assert_eq!(v.len(), 8);
        let count = |k| v.iter().filter(|l| l.kind == k).count();
        assert_eq!(count(LossKind::Sce), 1);
        assert_eq!(count(LossKind::WeightedSce), 1);
        assert_eq!(count(LossKind::Focal), 3);
        assert_eq!(count(LossKind::WeightedFocal), 3);
        let labels: std::collections::BTreeSet<_> = v.iter().map(|l| variant_label(l, 2)).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn sweep_changes_only_target_weight() {
        let base = LossConfig::weighted_sce(INSPECTION_WEIGHTS.to_vec());
        let s = weight_sweep(&base, 2).unwrap();
        let w: Vec<f64> = s.iter().map(|l| l.class_weights[2]).collect();
        assert_eq!(w, vec![2.5, 10.0, 40.0, 80.0]);
        for l in &s {
            for c in [0, 1, 3, 4, 5] {
                assert_eq!(l.class_weights[c], base.class_weights[c]);
            }
            assert_eq!((l.kind, l.gamma), (base.kind, base.gamma));
        }
        assert!(weight_sweep(&LossConfig::sce(), 2).is_err());
    }

    #[test]
    fn suite_rows_and_determinism() {
        let data: Vec<_> = (0..2)
            .map(|i| {
                generate_scene(&SynthConfig {
                    height: 16,
                    width: 16,
                    seed: i,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let model = UNetConfig {
            base_features: 2,
            depth: 2,
            ..Default::default()
        };
        let base = TrainConfig {
            max_epochs: 2,
            eval_every: 1,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let spec = SuiteSpec::new(
            model,
            base,
            vec![LossConfig::sce(), LossConfig::weighted_sce(INSPECTION_WEIGHTS.to_vec())],
            vec![1, 2],
        );
        let a = run_variant_suite(&spec, &data, &data).unwrap();
        let b = run_variant_suite(&spec, &data, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].per_seed.len(), 2);
        assert_eq!(a.to_csv().lines().count(), 3);
        assert!(a.row("W-SCE(w=10)").is_some());
        let text = a.to_string();
        assert_eq!(text.lines().count(), 3);
        let empty = SuiteSpec { variants: vec![], ..spec };
        assert!(run_variant_suite(&empty, &data, &data).is_err());
    }
}
