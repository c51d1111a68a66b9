//! Thin safe wrapper over `matrixmultiply::dgemm` plus the im2col/col2im
//! lowering shared by the convolution ops.

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given these
    // strides, and the three slices are distinct borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds one `channels x height x width` image into a
    /// `(channels*kh*kw) x (out_h*out_w)` matrix.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = oh * ow;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters-and-adds columns back into
    /// an image buffer.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = oh * ow;
        let mut row = 0;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = iy as usize * self.width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
