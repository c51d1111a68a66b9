//! Dense NCHW tensors and the layer operations used by the U-Net.
//!
//! Every operation is a pure function of its arguments. Forward ops that
//! need to route gradients return whatever cache the matching backward op
//! consumes; nothing is recorded on a global tape.

mod activation;
mod conv;
mod gemm;
mod norm;
mod pool;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use activation::{concat_channels, relu, relu_backward, softmax_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, upconv2d, upconv2d_backward};
pub use norm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, BatchNormCache,
    RunningStats,
};
pub use pool::{maxpool2d, maxpool2d_backward};

/// Whether batch-norm layers use batch statistics (and update their running
/// estimates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::dims(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dims(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.random_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dims(format!(
                "expected a rank-4 NCHW tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::dims(format!(
                "dot of {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dims(format!(
                "axpy of {:?} into {:?}",
                other.dims, self.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dims("cannot stack an empty list"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n_total = 0;
        for t in items {
            let (n, c2, h2, w2) = t.dims4()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::dims(format!(
                    "stacking {:?} with {:?}",
                    t.dims, first.dims
                )));
            }
            n_total += n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n_total, c, h, w], data)
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }
}

/// Gradients of one layer op: with respect to its input and to each named
/// parameter.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub grad_input: Tensor,
    pub grad_params: BTreeMap<String, Tensor>,
}

impl LayerGrads {
    pub(crate) fn take(&mut self, name: &str) -> Tensor {
        self.grad_params
            .remove(name)
            .unwrap_or_else(|| panic!("layer gradient `{name}` missing"))
    }
}
