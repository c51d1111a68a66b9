use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamHyper, AdamState};
use crate::data::{augment, collate, mix_seed, AugmentConfig, LabeledSample};
use crate::error::{Error, Result};
use crate::loss::{compute_loss, LossConfig};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::model::{Checkpoint, UNet};

const SHUFFLE_STREAM: u64 = 10;
const AUGMENT_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without a strict DSC improvement before stopping.
    pub early_stop_patience: usize,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub loss: LossConfig,
    pub adam: AdamHyper,
    pub augment: AugmentConfig,
    pub metrics: MetricsConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            max_epochs: 1800,
            early_stop_patience: 15,
            eval_every: 10,
            loss: LossConfig::default(),
            adam: AdamHyper::default(),
            augment: AugmentConfig::default(),
            metrics: MetricsConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument {
                    arg: name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        self.loss.validate(classes)?;
        self.adam.validate()?;
        self.augment.validate()?;
        self.metrics.validate(classes)
    }
}

/// Eval-set metrics for the target class; `None` where undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub total_error: Option<f64>,
}

impl From<&MetricsReport> for EvalRecord {
    fn from(r: &MetricsReport) -> Self {
        EvalRecord {
            dsc: r.dsc,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            total_error: r.total_error,
        }
    }
}

impl EvalRecord {
    /// Score used for model selection; an undefined DSC ranks as 0.
    pub fn score(&self) -> f64 {
        self.dsc.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the batch losses.
    pub train_loss: f64,
    pub eval: Option<EvalRecord>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,eval_dsc,eval_sensitivity,eval_specificity,eval_total_error";

    pub fn evaluations(&self) -> impl Iterator<Item = (usize, &EvalRecord)> {
        self.records.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.epoch, e)))
    }

    /// Highest selection score over all evaluations.
    pub fn best_score(&self) -> Option<f64> {
        self.evaluations().map(|(_, e)| e.score()).reduce(f64::max)
    }

    /// Deterministic CSV: wall time is left out so identical runs produce
    /// identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x}"));
        for r in &self.records {
            let _ = write!(out, "{},{}", r.epoch, r.train_loss);
            match &r.eval {
                Some(e) => {
                    let _ = writeln!(
                        out,
                        ",{},{},{},{}",
                        f(e.dsc),
                        f(e.sensitivity),
                        f(e.specificity),
                        f(e.total_error)
                    );
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }
}

/// Trains `model` and returns the best checkpoint by eval-set DSC together
/// with the per-epoch history.
pub fn train(
    model: UNet,
    train_set: &[LabeledSample],
    eval_set: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    train_with_observer(model, train_set, eval_set, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    mut model: UNet,
    train_set: &[LabeledSample],
    eval_set: &[LabeledSample],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(model.config().num_classes)?;
    for s in train_set.iter().chain(eval_set) {
        model.config().check_input(s.height(), s.width())?;
    }

    let names = model.param_names().to_vec();
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;
    let start = Instant::now();
    let n = train_set.len();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            config.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        )));

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented = chunk
                .iter()
                .map(|&i| {
                    let draw = mix_seed(config.seed, AUGMENT_STREAM, ((epoch - 1) * n + i) as u64);
                    augment(&train_set[i], &config.augment, draw)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&LabeledSample> = augmented.iter().collect();
            let (input, targets) = collate(&refs)?;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                },
                e => e,
            };
            let (logits, tape) = model.forward_train(&input).map_err(diverged)?;
            let (loss, grad) = match compute_loss(&logits, &targets, &config.loss) {
                // a batch whose pixels were all pushed out of frame
                Err(Error::NoValidPixels) => continue,
                other => other.map_err(diverged)?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            let grads = model.backward(&tape, &grad)?;
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            model.commit_batch_stats(&tape);
            let t = adam.step + 1;
            adam_step(model.params_mut(), &grads, &mut adam, &config.adam, t)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };

        let mut record = EpochRecord {
            epoch,
            train_loss,
            eval: None,
            wall_time_s: 0.0,
        };
        let mut stop = false;
        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            // evaluate exactly what a saved checkpoint would reload
            let mut snapshot = Checkpoint::capture(&model, Some(adam.snapshot(&names)), epoch, 0.0);
            let report = evaluate(&snapshot.to_model()?, eval_set, &config.metrics)?;
            let eval = EvalRecord::from(&report);
            let score = eval.score();
            if best.as_ref().is_none_or(|b| score > b.eval_dsc) {
                snapshot.eval_dsc = score;
                best = Some(snapshot);
                history.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= config.early_stop_patience;
            }
            record.eval = Some(eval);
        }
        record.wall_time_s = start.elapsed().as_secs_f64();
        observer(&record);
        history.records.push(record);
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    let best = best.expect("the final epoch is always evaluated");
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SynthConfig};
    use crate::model::UNetConfig;

    fn tiny_model(momentum: f64) -> UNet {
        UNet::new(
            UNetConfig {
                base_features: 4,
                depth: 2,
                bn_momentum: momentum,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn scenes(k: usize) -> Vec<LabeledSample> {
        (0..k)
            .map(|i| {
                generate_scene(&SynthConfig {
                    height: 16,
                    width: 16,
                    seed: 40 + i as u64,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn frozen_model_stops_after_patience_plus_one() {
        let data = scenes(2);
        let cfg = TrainConfig {
            early_stop_patience: 3,
            eval_every: 1,
            max_epochs: 50,
            adam: AdamHyper {
                lr: 0.0,
                ..Default::default()
            },
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let model = tiny_model(0.0);
        let before = model.params().to_vec();
        let (best, history) = train(model, &data, &data, &cfg).unwrap();
        assert_eq!(history.evaluations().count(), 4);
        assert!(history.stopped_early);
        assert_eq!(best.epoch, 1);
        let narrowed: Vec<_> = before.iter().map(|t| t.map(|v| v as f32 as f64)).collect();
        let restored = best.to_model().unwrap();
        assert_eq!(restored.params(), &narrowed[..]);
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let data = scenes(2);
        let cfg = TrainConfig {
            max_epochs: 50,
            eval_every: 50,
            augment: AugmentConfig::disabled(),
            adam: AdamHyper {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, h) = train(tiny_model(0.1), &data[..1], &data[..1], &cfg).unwrap();
        let first: f64 = h.records[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
        let last: f64 = h.records[45..].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn best_checkpoint_matches_history_and_is_reproducible() {
        let data = scenes(3);
        let cfg = TrainConfig {
            max_epochs: 4,
            eval_every: 1,
            ..Default::default()
        };
        let (best, h) = train(tiny_model(0.1), &data, &data[..1], &cfg).unwrap();
        assert_eq!(Some(best.eval_dsc), h.best_score());
        assert_eq!(h.records.len(), 4);
        let (best2, h2) = train(tiny_model(0.1), &data, &data[..1], &cfg).unwrap();
        assert_eq!(best, best2);
        assert_eq!(h.to_csv(), h2.to_csv());
        let again = evaluate(&best.to_model().unwrap(), &data[..1], &cfg.metrics).unwrap();
        assert_eq!(again.dsc.unwrap_or(0.0), best.eval_dsc);
    }

    #[test]
    fn csv_shape() {
        let data = scenes(1);
        let cfg = TrainConfig {
            max_epochs: 3,
            eval_every: 2,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let (_, h) = train(tiny_model(0.1), &data, &data, &cfg).unwrap();
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        for l in &lines {
            assert_eq!(l.split(',').count(), 6);
        }
        assert!(lines[1].ends_with(",,,,"));
        assert!(!lines[2].ends_with(",,,,"));
    }

    #[test]
    fn rejects_empty_sets_and_bad_config() {
        let data = scenes(1);
        let cfg = TrainConfig::default();
        assert!(matches!(train(tiny_model(0.1), &[], &data, &cfg), Err(Error::EmptyDataset)));
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(tiny_model(0.1), &data, &data, &bad).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let data = scenes(2);
        let cfg = TrainConfig {
            max_epochs: 3,
            augment: AugmentConfig::disabled(),
            adam: AdamHyper {
                lr: 1e300,
                ..Default::default()
            },
            ..Default::default()
        };
        match train(tiny_model(0.1), &data, &data, &cfg) {
            Err(Error::Diverged { epoch, batch, .. }) => {
                assert!(epoch >= 1);
                let msg = Error::Diverged { epoch, batch, loss: f64::NAN }.to_string();
                assert!(msg.contains(&epoch.to_string()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
