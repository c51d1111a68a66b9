use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_output` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if input.dims() != grad_output.dims() {
        return Err(Error::dims(format!(
            "relu grad {:?} vs input {:?}",
            grad_output.dims(),
            input.dims()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.dims().to_vec(), data))
}

/// Softmax over the channel axis, independently at every pixel.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[base + ch * hw + p]);
            }
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - max).exp();
                out[base + ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] /= total;
            }
        }
    }
    Tensor::from_parts(input.dims().to_vec(), out).ensure_finite("softmax_channels")
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (n2, cb, h2, w2) = b.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::dims(format!(
            "concat of {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

/// Inverse of [`concat_channels`]: the first `first_channels` channels and
/// the rest.
pub fn split_channels(input: &Tensor, first_channels: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    if first_channels == 0 || first_channels >= c {
        return Err(Error::dims(format!(
            "cannot split {c} channels at {first_channels}"
        )));
    }
    let hw = h * w;
    let (ca, cb) = (first_channels, c - first_channels);
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for i in 0..n {
        let item = &input.data()[i * c * hw..(i + 1) * c * hw];
        a.extend_from_slice(&item[..ca * hw]);
        b.extend_from_slice(&item[ca * hw..]);
    }
    Ok((
        Tensor::from_parts(vec![n, ca, h, w], a),
        Tensor::from_parts(vec![n, cb, h, w], b),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax_channels(&pixel(&[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_channels(&pixel(&[2f64.ln(), 0.0])).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_channels(&pixel(&[1000.0, 0.0, -1000.0])).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_and_backward() {
        let x = pixel(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &pixel(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 4, 2, 2]);
        assert_eq!(c.data()[4], 100.0);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(matches!(concat_channels(&a, &b), Err(Error::DimMismatch(_))));
    }
}
