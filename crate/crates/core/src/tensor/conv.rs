use std::collections::BTreeMap;

use super::gemm::{gemm, Geometry};
use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Geometry> {
    let (_, c, h, w) = input.dims4()?;
    let (_, kc, kh, kw) = kernel.dims4()?;
    if stride == 0 {
        return Err(Error::InvalidArgument {
            arg: "stride",
            reason: "must be positive".into(),
        });
    }
    if kc != c {
        return Err(Error::dims(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dims(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(Geometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad: padding,
    })
}

fn check_bias(bias: &Tensor, channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(Error::dims(format!(
            "bias has {} entries for {channels} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// 2-D cross-correlation with symmetric zero padding.
///
/// `kernel` is `out_ch x in_ch x kh x kw`; output spatial size is
/// `(H + 2*padding - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let (n, _, h, w) = input.dims4()?;
    let out_ch = kernel.dims()[0];
    check_bias(bias, out_ch)?;

    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (rows, ncols) = (geo.rows(), geo.cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; n * out_ch * ncols];
    for b in 0..n {
        let image = &input.data()[b * geo.channels * h * w..(b + 1) * geo.channels * h * w];
        geo.im2col(image, &mut cols);
        let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
        for (o, plane) in dst.chunks_mut(ncols).enumerate() {
            plane.fill(bias.data()[o]);
        }
        gemm(out_ch, rows, ncols, kernel.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::from_parts(vec![n, out_ch, oh, ow], out).ensure_finite("conv2d")
}

/// Gradients of [`conv2d`] with respect to `input`, `"kernel"` and `"bias"`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<LayerGrads> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let (n, c, h, w) = input.dims4()?;
    let out_ch = kernel.dims()[0];
    let expected = [n, out_ch, geo.out_h(), geo.out_w()];
    if grad_output.dims() != expected {
        return Err(Error::dims(format!(
            "grad_output dims {:?}, expected {expected:?}",
            grad_output.dims()
        )));
    }

    let (rows, ncols) = (geo.rows(), geo.cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut grad_cols = vec![0.0; rows * ncols];
    let mut grad_input = vec![0.0; input.len()];
    let mut grad_kernel = vec![0.0; kernel.len()];
    let mut grad_bias = vec![0.0; out_ch];
    for b in 0..n {
        let image = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let gout = &grad_output.data()[b * out_ch * ncols..(b + 1) * out_ch * ncols];
        geo.im2col(image, &mut cols);
        gemm(out_ch, ncols, rows, gout, false, &cols, true, 1.0, &mut grad_kernel);
        gemm(rows, out_ch, ncols, kernel.data(), true, gout, false, 0.0, &mut grad_cols);
        geo.col2im(&grad_cols, &mut grad_input[b * c * h * w..(b + 1) * c * h * w]);
        for (o, plane) in gout.chunks(ncols).enumerate() {
            grad_bias[o] += plane.iter().sum::<f64>();
        }
    }

    let mut grad_params = BTreeMap::new();
    grad_params.insert(
        "kernel".to_string(),
        Tensor::from_parts(kernel.dims().to_vec(), grad_kernel).ensure_finite("conv2d_backward")?,
    );
    grad_params.insert(
        "bias".to_string(),
        Tensor::from_parts(vec![out_ch], grad_bias).ensure_finite("conv2d_backward")?,
    );
    Ok(LayerGrads {
        grad_input: Tensor::from_parts(input.dims().to_vec(), grad_input)
            .ensure_finite("conv2d_backward")?,
        grad_params,
    })
}

/// Output geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of.
fn upconv_geometry(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Geometry> {
    let (_, c, h, w) = input.dims4()?;
    let (kc, out_ch, kh, kw) = kernel.dims4()?;
    if stride == 0 {
        return Err(Error::InvalidArgument {
            arg: "stride",
            reason: "must be positive".into(),
        });
    }
    if kc != c {
        return Err(Error::dims(format!(
            "transposed kernel expects {kc} input channels, input has {c}"
        )));
    }
    Ok(Geometry {
        channels: out_ch,
        height: (h - 1) * stride + kh,
        width: (w - 1) * stride + kw,
        kh,
        kw,
        stride,
        pad: 0,
    })
}

/// Transposed convolution. `kernel` is `in_ch x out_ch x kh x kw`; output
/// spatial size is `(H - 1) * stride + kh`.
///
/// With zero bias this is the adjoint of [`conv2d`] run with the same kernel
/// tensor, stride and no padding.
pub fn upconv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let geo = upconv_geometry(input, kernel, stride)?;
    let (n, c, h, w) = input.dims4()?;
    let out_ch = geo.channels;
    check_bias(bias, out_ch)?;
    debug_assert_eq!(geo.cols(), h * w);

    let rows = geo.rows();
    let plane = geo.height * geo.width;
    let mut cols = vec![0.0; rows * h * w];
    let mut out = vec![0.0; n * out_ch * plane];
    for b in 0..n {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        gemm(rows, c, h * w, kernel.data(), true, x, false, 0.0, &mut cols);
        let dst = &mut out[b * out_ch * plane..(b + 1) * out_ch * plane];
        for (o, p) in dst.chunks_mut(plane).enumerate() {
            p.fill(bias.data()[o]);
        }
        geo.col2im(&cols, dst);
    }
    Tensor::from_parts(vec![n, out_ch, geo.height, geo.width], out).ensure_finite("upconv2d")
}

/// Gradients of [`upconv2d`] with respect to `input`, `"kernel"` and
/// `"bias"`.
pub fn upconv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_output: &Tensor,
    stride: usize,
) -> Result<LayerGrads> {
    let geo = upconv_geometry(input, kernel, stride)?;
    let (n, c, h, w) = input.dims4()?;
    let out_ch = geo.channels;
    let expected = [n, out_ch, geo.height, geo.width];
    if grad_output.dims() != expected {
        return Err(Error::dims(format!(
            "grad_output dims {:?}, expected {expected:?}",
            grad_output.dims()
        )));
    }

    let rows = geo.rows();
    let plane = geo.height * geo.width;
    let mut gcols = vec![0.0; rows * h * w];
    let mut grad_input = vec![0.0; input.len()];
    let mut grad_kernel = vec![0.0; kernel.len()];
    let mut grad_bias = vec![0.0; out_ch];
    for b in 0..n {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let gout = &grad_output.data()[b * out_ch * plane..(b + 1) * out_ch * plane];
        geo.im2col(gout, &mut gcols);
        gemm(c, rows, h * w, kernel.data(), false, &gcols, false, 0.0, &mut grad_input[b * c * h * w..(b + 1) * c * h * w]);
        gemm(c, h * w, rows, x, false, &gcols, true, 1.0, &mut grad_kernel);
        for (o, p) in gout.chunks(plane).enumerate() {
            grad_bias[o] += p.iter().sum::<f64>();
        }
    }

    let mut grad_params = BTreeMap::new();
    grad_params.insert(
        "kernel".to_string(),
        Tensor::from_parts(kernel.dims().to_vec(), grad_kernel)
            .ensure_finite("upconv2d_backward")?,
    );
    grad_params.insert(
        "bias".to_string(),
        Tensor::from_parts(vec![out_ch], grad_bias).ensure_finite("upconv2d_backward")?,
    );
    Ok(LayerGrads {
        grad_input: Tensor::from_parts(input.dims().to_vec(), grad_input)
            .ensure_finite("upconv2d_backward")?,
        grad_params,
    })
}
