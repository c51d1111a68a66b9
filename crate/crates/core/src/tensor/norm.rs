use std::collections::BTreeMap;

use super::{LayerGrads, Mode, Tensor};
use crate::error::{Error, Result};

/// Exponential running estimates of per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Folds the batch statistics held in `cache` into the running estimates.
    /// The variance estimate uses the unbiased batch variance.
    pub fn update(&mut self, cache: &BatchNormCache, momentum: f64) {
        let m = cache.count as f64;
        let correction = if cache.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * cache.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * cache.var[c] * correction;
        }
        self.initialized = true;
    }
}

/// Everything the train-mode backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

fn check_affine(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<usize> {
    let (_, c, _, _) = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dims(format!(
            "gamma/beta lengths {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "eps",
            reason: format!("must be positive, got {eps}"),
        });
    }
    Ok(c)
}

/// Batch normalization using the statistics of `input` over batch, height
/// and width. Does not touch any running statistics.
pub fn batchnorm2d_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = check_affine(input, gamma, beta, eps)?;
    let (n, _, h, w) = input.dims4()?;
    let hw = h * w;
    let count = n * hw;
    let x = input.data();

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for b in 0..n {
            ss += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    let dims = input.dims().to_vec();
    let cache = BatchNormCache {
        x_hat: Tensor::from_parts(dims.clone(), x_hat),
        mean,
        var,
        inv_std,
        count,
    };
    Ok((
        Tensor::from_parts(dims, out).ensure_finite("batchnorm2d")?,
        cache,
    ))
}

/// Batch normalization with the stored running statistics.
pub fn batchnorm2d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    eps: f64,
) -> Result<Tensor> {
    let c = check_affine(input, gamma, beta, eps)?;
    if !stats.initialized {
        return Err(Error::UninitializedRunningStats);
    }
    if stats.mean.len() != c {
        return Err(Error::dims(format!(
            "running stats for {} channels, input has {c}",
            stats.mean.len()
        )));
    }
    let (n, _, h, w) = input.dims4()?;
    let hw = h * w;
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] / (stats.var[ch] + eps).sqrt();
            let shift = beta.data()[ch] - stats.mean[ch] * scale;
            for v in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_parts(input.dims().to_vec(), out).ensure_finite("batchnorm2d")
}

/// Stateful convenience wrapper: in train mode normalizes with batch
/// statistics and folds them into `state`; in eval mode reads `state` only.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (out, cache) = batchnorm2d_train(input, gamma, beta, eps)?;
            state.update(&cache, momentum);
            Ok(out)
        }
        Mode::Eval => batchnorm2d_eval(input, gamma, beta, state, eps),
    }
}

/// Train-mode gradients with respect to input, `"gamma"` and `"beta"`.
pub fn batchnorm2d_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    grad_output: &Tensor,
) -> Result<LayerGrads> {
    if grad_output.dims() != cache.x_hat.dims() {
        return Err(Error::dims(format!(
            "grad_output dims {:?}, expected {:?}",
            grad_output.dims(),
            cache.x_hat.dims()
        )));
    }
    let (n, c, h, w) = grad_output.dims4()?;
    if gamma.len() != c {
        return Err(Error::dims(format!("gamma length {} for {c} channels", gamma.len())));
    }
    let hw = h * w;
    let m = cache.count as f64;
    let g = grad_output.data();
    let xh = cache.x_hat.data();

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    // dx = gamma * inv_std / m * (m*g - sum(g) - x_hat * sum(g*x_hat))
    let mut dx = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = k * (m * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }

    let mut grad_params = BTreeMap::new();
    grad_params.insert("gamma".to_string(), Tensor::from_parts(vec![c], dgamma));
    grad_params.insert("beta".to_string(), Tensor::from_parts(vec![c], dbeta));
    Ok(LayerGrads {
        grad_input: Tensor::from_parts(grad_output.dims().to_vec(), dx)
            .ensure_finite("batchnorm2d_backward")?,
        grad_params,
    })
}
