//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each layer op is reduced to a scalar through a random linear readout
//! `<r, f(x)>`; its analytic gradient is compared entry-wise against central
//! differences of that readout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{compute_loss, LossConfig, PixelTargets};
use crate::tensor::{
    batchnorm2d_backward, batchnorm2d_train, concat_channels, conv2d, conv2d_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, split_channels, upconv2d, upconv2d_backward, Tensor,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the entry-wise relative error, so that entries
/// whose true gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(
    x: &Tensor,
    eps: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest entry-wise `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims(), "gradient dims differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Worst relative error seen for one op across all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    /// Perturbs the analytic conv2d kernel gradient so the suite must fail.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            instances: 20,
            inject_fault: false,
        }
    }
}

struct Recorder {
    op: String,
    instances: usize,
    worst: f64,
}

impl Recorder {
    fn new(op: impl Into<String>) -> Self {
        Recorder {
            op: op.into(),
            instances: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, analytic: &Tensor, numeric: &Tensor) {
        self.worst = self.worst.max(max_relative_error(analytic, numeric));
    }

    fn finish(self) -> GradCheck {
        GradCheck {
            op: self.op,
            instances: self.instances,
            max_rel_error: self.worst,
        }
    }
}

fn readout(out: &Tensor, weights: &Tensor) -> Result<f64> {
    out.dot(weights)
}

fn small_dims(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=4);
    let (h, w) = if even {
        (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4))
    } else {
        (rng.random_range(3..=8), rng.random_range(3..=8))
    };
    [n, c, h, w]
}

/// Values bounded away from zero so no probe crosses a ReLU kink.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let mag = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values with gaps far larger than the probe step.
fn tie_free(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = dims.iter().product();
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    Tensor::from_fn(dims, |i| ranks[i] as f64 * 0.01 - 0.5 * len as f64 * 0.01)
}

fn check_conv(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("conv2d");
    for _ in 0..opts.instances {
        let [n, c, h, w] = small_dims(rng, false);
        let out_ch = rng.random_range(1..=4);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let x = Tensor::randn(&[n, c, h, w], 1.0, rng);
        let kernel = Tensor::randn(&[out_ch, c, k, k], 0.5, rng);
        let bias = Tensor::randn(&[out_ch], 0.5, rng);
        let y = conv2d(&x, &kernel, &bias, stride, pad)?;
        let r = Tensor::randn(y.dims(), 1.0, rng);
        let mut g = conv2d_backward(&x, &kernel, &r, stride, pad)?;
        if opts.inject_fault {
            g.grad_params
                .get_mut("kernel")
                .expect("kernel grad")
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 1.0 + 1e-3);
        }
        let nx = central_difference(&x, FD_STEP, |x| readout(&conv2d(x, &kernel, &bias, stride, pad)?, &r))?;
        let nk = central_difference(&kernel, FD_STEP, |k| readout(&conv2d(&x, k, &bias, stride, pad)?, &r))?;
        let nb = central_difference(&bias, FD_STEP, |b| readout(&conv2d(&x, &kernel, b, stride, pad)?, &r))?;
        rec.record(&g.grad_input, &nx);
        rec.record(&g.grad_params["kernel"], &nk);
        rec.record(&g.grad_params["bias"], &nb);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

fn check_upconv(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("upconv2d");
    for _ in 0..opts.instances {
        let [n, c, _, _] = small_dims(rng, false);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let out_ch = rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let k = rng.random_range(1..=3);
        let x = Tensor::randn(&[n, c, h, w], 1.0, rng);
        let kernel = Tensor::randn(&[c, out_ch, k, k], 0.5, rng);
        let bias = Tensor::randn(&[out_ch], 0.5, rng);
        let y = upconv2d(&x, &kernel, &bias, stride)?;
        let r = Tensor::randn(y.dims(), 1.0, rng);
        let g = upconv2d_backward(&x, &kernel, &r, stride)?;
        let nx = central_difference(&x, FD_STEP, |x| readout(&upconv2d(x, &kernel, &bias, stride)?, &r))?;
        let nk = central_difference(&kernel, FD_STEP, |k| readout(&upconv2d(&x, k, &bias, stride)?, &r))?;
        let nb = central_difference(&bias, FD_STEP, |b| readout(&upconv2d(&x, &kernel, b, stride)?, &r))?;
        rec.record(&g.grad_input, &nx);
        rec.record(&g.grad_params["kernel"], &nk);
        rec.record(&g.grad_params["bias"], &nb);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

fn check_maxpool(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("maxpool2d");
    for _ in 0..opts.instances {
        let dims = small_dims(rng, true);
        let x = tie_free(&dims, rng);
        let (y, idx) = maxpool2d(&x, 2)?;
        let r = Tensor::randn(y.dims(), 1.0, rng);
        let g = maxpool2d_backward(x.dims(), &idx, &r)?;
        let nx = central_difference(&x, FD_STEP, |x| readout(&maxpool2d(x, 2)?.0, &r))?;
        rec.record(&g, &nx);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

fn check_batchnorm(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("batchnorm2d");
    let eps = 1e-5;
    for _ in 0..opts.instances {
        let dims = small_dims(rng, false);
        let c = dims[1];
        let x = Tensor::randn(&dims, 1.5, rng).map(|v| v + 0.7);
        let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
        let beta = Tensor::randn(&[c], 0.5, rng);
        let (y, cache) = batchnorm2d_train(&x, &gamma, &beta, eps)?;
        let r = Tensor::randn(y.dims(), 1.0, rng);
        let g = batchnorm2d_backward(&cache, &gamma, &r)?;
        let nx = central_difference(&x, FD_STEP, |x| readout(&batchnorm2d_train(x, &gamma, &beta, eps)?.0, &r))?;
        let ng = central_difference(&gamma, FD_STEP, |gm| readout(&batchnorm2d_train(&x, gm, &beta, eps)?.0, &r))?;
        let nb = central_difference(&beta, FD_STEP, |bt| readout(&batchnorm2d_train(&x, &gamma, bt, eps)?.0, &r))?;
        rec.record(&g.grad_input, &nx);
        rec.record(&g.grad_params["gamma"], &ng);
        rec.record(&g.grad_params["beta"], &nb);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

fn check_relu(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("relu");
    for _ in 0..opts.instances {
        let dims = small_dims(rng, false);
        let x = away_from_zero(&dims, rng);
        let r = Tensor::randn(&dims, 1.0, rng);
        let g = relu_backward(&x, &r)?;
        let nx = central_difference(&x, FD_STEP, |x| readout(&relu(x), &r))?;
        rec.record(&g, &nx);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

fn check_concat(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheck> {
    let mut rec = Recorder::new("concat_channels");
    for _ in 0..opts.instances {
        let [n, ca, h, w] = small_dims(rng, false);
        let cb = rng.random_range(1..=4);
        let a = Tensor::randn(&[n, ca, h, w], 1.0, rng);
        let b = Tensor::randn(&[n, cb, h, w], 1.0, rng);
        let r = Tensor::randn(&[n, ca + cb, h, w], 1.0, rng);
        let (ga, gb) = split_channels(&r, ca)?;
        let na = central_difference(&a, FD_STEP, |a| readout(&concat_channels(a, &b)?, &r))?;
        let nb = central_difference(&b, FD_STEP, |b| readout(&concat_channels(&a, b)?, &r))?;
        rec.record(&ga, &na);
        rec.record(&gb, &nb);
        rec.instances += 1;
    }
    Ok(rec.finish())
}

/// Loss configurations covered by the suite: both cross-entropy kinds plus
/// both focal kinds at each focusing value.
pub fn loss_variants(classes: usize, rng: &mut impl Rng) -> Vec<LossConfig> {
    let weights: Vec<f64> = (0..classes).map(|_| rng.random_range(0.5..10.0)).collect();
    let mut out = vec![
        LossConfig::sce(),
        LossConfig::weighted_sce(weights.clone()),
    ];
    for gamma in [0.5, 1.0, 2.0] {
        out.push(LossConfig::focal(gamma));
        out.push(LossConfig::weighted_focal(gamma, weights.clone()));
    }
    out
}

fn check_losses(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<Vec<GradCheck>> {
    const CLASSES: usize = 4;
    let names: Vec<String> = loss_variants(CLASSES, rng)
        .iter()
        .map(|c| format!("loss {}", c.name()))
        .collect();
    let mut recs: Vec<Recorder> = names.into_iter().map(Recorder::new).collect();
    for _ in 0..opts.instances {
        let variants = loss_variants(CLASSES, rng);
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let logits = Tensor::randn(&[n, CLASSES, h, w], 1.5, rng);
        let pixels = n * h * w;
        let labels: Vec<u8> = (0..pixels).map(|_| rng.random_range(0..CLASSES as u8)).collect();
        let mut valid: Vec<bool> = (0..pixels).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let targets = PixelTargets::new(n, h, w, labels, valid)?;
        for (rec, cfg) in recs.iter_mut().zip(&variants) {
            let (_, g) = compute_loss(&logits, &targets, cfg)?;
            let num = central_difference(&logits, FD_STEP, |z| Ok(compute_loss(z, &targets, cfg)?.0))?;
            rec.record(&g, &num);
            rec.instances += 1;
        }
    }
    Ok(recs.into_iter().map(Recorder::finish).collect())
}

/// Runs the full gradient suite: every layer op and every loss variant.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = vec![
        check_conv(&mut rng, opts)?,
        check_upconv(&mut rng, opts)?,
        check_maxpool(&mut rng, opts)?,
        check_batchnorm(&mut rng, opts)?,
        check_relu(&mut rng, opts)?,
        check_concat(&mut rng, opts)?,
    ];
    out.extend(check_losses(&mut rng, opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_difference(&x, 1e-3, |x| Ok(x.data().iter().map(|v| v * v).sum())).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let opts = SuiteOptions {
            seed: 3,
            instances: 3,
            inject_fault: false,
        };
        for check in run_suite(&opts).unwrap() {
            assert!(check.passes(1e-5), "{check:?}");
        }
        let faulty = SuiteOptions {
            inject_fault: true,
            ..opts
        };
        let conv = &run_suite(&faulty).unwrap()[0];
        assert_eq!(conv.op, "conv2d");
        assert!(!conv.passes(1e-4));
    }
}
