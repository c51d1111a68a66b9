use super::Tensor;
use crate::error::{Error, Result};

/// Non-overlapping max pooling with a square `window`.
///
/// Returns the pooled tensor and, for every output cell, the flat index into
/// `input` of the maximum. Ties go to the first position in row-major order.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 {
        return Err(Error::InvalidArgument {
            arg: "window",
            reason: "must be positive".into(),
        });
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::dims(format!(
            "spatial dims {h}x{w} not divisible by pooling window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    let row = base + (oy * window + dy) * w + ox * window;
                    for idx in row..row + window {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

/// Routes `grad_output` back to the recorded argmax positions.
pub fn maxpool2d_backward(
    input_dims: &[usize],
    argmax: &[usize],
    grad_output: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_output.len() {
        return Err(Error::dims(format!(
            "{} argmax indices for {} gradient entries",
            argmax.len(),
            grad_output.len()
        )));
    }
    let mut grad = Tensor::zeros(input_dims);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_output.data()) {
        let slot = g
            .get_mut(idx)
            .ok_or_else(|| Error::dims(format!("argmax index {idx} out of range")))?;
        *slot += v;
    }
    Ok(grad)
}
