//! Adam, the mini-batch training loop with Dice-based early stopping, and
//! the loss-variant comparison suite.

mod suite;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OptimizerSnapshot;
use crate::tensor::Tensor;

pub use suite::{
    run_variant_suite_with, variant_label, SuiteSpec,
    paper_variants, run_variant_suite, weight_sweep, ComparisonTable, SuiteRow, SWEEP_MULTIPLIERS,
};
pub use train::{train, train_with_observer, EpochRecord, EvalRecord, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    /// `lr = 0` is allowed so a model can be trained "frozen".
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                arg: "adam",
                reason: format!("{self:?} outside lr >= 0, betas in [0, 1), eps > 0"),
            })
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn snapshot(&self, names: &[String]) -> OptimizerSnapshot {
        let narrow = |ts: &[Tensor]| -> BTreeMap<String, Tensor> {
            names
                .iter()
                .cloned()
                .zip(ts.iter().map(|t| t.map(|v| v as f32 as f64)))
                .collect()
        };
        OptimizerSnapshot {
            step: self.step,
            first_moment: narrow(&self.m),
            second_moment: narrow(&self.v),
        }
    }

    /// Rebuilds state ordered like `names`, checking every shape.
    pub fn from_snapshot(snap: &OptimizerSnapshot, names: &[String], params: &[Tensor]) -> Result<Self> {
        let pick = |map: &BTreeMap<String, Tensor>| -> Result<Vec<Tensor>> {
            if map.len() != names.len() {
                return Err(Error::Inconsistent(format!(
                    "{} optimizer moments for {} parameters",
                    map.len(),
                    names.len()
                )));
            }
            names
                .iter()
                .zip(params)
                .map(|(n, p)| match map.get(n) {
                    Some(t) if t.dims() == p.dims() => Ok(t.clone()),
                    _ => Err(Error::Inconsistent(format!("optimizer moment for `{n}`"))),
                })
                .collect()
        };
        Ok(AdamState {
            m: pick(&snap.first_moment)?,
            v: pick(&snap.second_moment)?,
            step: snap.step,
        })
    }
}

/// One bias-corrected Adam update at step `t` (1-based), moving each
/// parameter against its gradient.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument {
            arg: "t",
            reason: "Adam steps are counted from 1".into(),
        });
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dims(format!(
            "{} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (i, ((p, g), (m, v))) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)).enumerate() {
        if p.dims() != g.dims() || p.dims() != m.dims() || p.dims() != v.dims() {
            return Err(Error::dims(format!(
                "parameter {i}: {:?} vs grad {:?}",
                p.dims(),
                g.dims()
            )));
        }
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::full(&[1], v)
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = vec![scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[scalar(1.0)], &mut s, &AdamHyper::default(), 1).unwrap();
        assert!((s.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.001).abs() < 1e-15);
        assert!((p[0].data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = vec![scalar(3.5)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[scalar(0.0)], &mut s, &AdamHyper::default(), 1).unwrap();
        assert_eq!(p[0].data()[0], 3.5);
    }

    #[test]
    fn update_opposes_gradient() {
        for g in [1e-6, 0.3, 42.0, -2.0] {
            let mut p = vec![scalar(1.0)];
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[scalar(g)], &mut s, &AdamHyper::default(), 1).unwrap();
            assert!((p[0].data()[0] - 1.0).signum() == -g.signum());
        }
    }

    #[test]
    fn zero_lr_is_bitwise_frozen() {
        let mut p = vec![Tensor::from_fn(&[5], |i| i as f64 * 0.37)];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            lr: 0.0,
            ..Default::default()
        };
        for t in 1..20 {
            adam_step(&mut p, &[Tensor::full(&[5], t as f64)], &mut s, &hyper, t).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_and_bad_step() {
        let mut p = vec![scalar(0.0)];
        let mut s = AdamState::new(&p);
        let h = AdamHyper::default();
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &h, 1).is_err());
        assert!(adam_step(&mut p, &[], &mut s, &h, 1).is_err());
        assert!(adam_step(&mut p, &[scalar(1.0)], &mut s, &h, 0).is_err());
        assert!(AdamHyper { beta1: 1.0, ..h }.validate().is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let p = vec![scalar(0.0), Tensor::zeros(&[2, 2])];
        let names = vec!["a".to_string(), "b".to_string()];
        let mut s = AdamState::new(&p);
        s.m[1] = Tensor::full(&[2, 2], 0.25);
        s.step = 7;
        let back = AdamState::from_snapshot(&s.snapshot(&names), &names, &p).unwrap();
        assert_eq!(back, s);
        assert!(AdamState::from_snapshot(&s.snapshot(&names), &names[..1], &p[..1]).is_err());
    }
}
