//! Contrast-limited adaptive histogram equalization, following the
//! tile/clip/interpolate scheme of OpenCV's `CLAHE`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CLIP_LIMIT: f64 = 2.0;
pub const DEFAULT_TILES: (usize, usize) = (8, 8);

/// Equalizes one 8-bit plane (`height x width`, values 0..=255).
pub fn clahe_plane(
    plane: &[u8],
    height: usize,
    width: usize,
    clip_limit: f64,
    tiles: (usize, usize),
) -> Result<Vec<u8>> {
    if plane.is_empty() || height == 0 || width == 0 {
        return Err(Error::InvalidArgument {
            arg: "image",
            reason: "empty image".into(),
        });
    }
    if clip_limit.is_nan() || clip_limit <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "clip_limit",
            reason: format!("must be positive, got {clip_limit}"),
        });
    }
    let (tiles_y, tiles_x) = tiles;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::InvalidArgument {
            arg: "tiles",
            reason: "tile grid must be at least 1x1".into(),
        });
    }
    if plane.len() != height * width {
        return Err(Error::dims(format!(
            "{} pixels for a {height}x{width} plane",
            plane.len()
        )));
    }

    // Pad to a multiple of the tile grid by reflect-101, as OpenCV does.
    let th = height.div_ceil(tiles_y);
    let tw = width.div_ceil(tiles_x);
    let (ph, pw) = (th * tiles_y, tw * tiles_x);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            let over = i - (n - 1);
            (n - 1).saturating_sub(over)
        }
    };
    let sample = |y: usize, x: usize| plane[reflect(y, height) * width + reflect(x, width)];

    let tile_area = th * tw;
    let clip = if clip_limit > 0.0 {
        ((clip_limit * tile_area as f64 / 256.0) as usize).max(1)
    } else {
        usize::MAX
    };
    let lut_scale = 255.0 / tile_area as f64;

    let mut luts = vec![[0u8; 256]; tiles_y * tiles_x];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0usize; 256];
            for y in ty * th..(ty + 1) * th {
                for x in tx * tw..(tx + 1) * tw {
                    debug_assert!(y < ph && x < pw);
                    hist[sample(y, x) as usize] += 1;
                }
            }
            let mut clipped = 0;
            for h in hist.iter_mut() {
                if *h > clip {
                    clipped += *h - clip;
                    *h = clip;
                }
            }
            let batch = clipped / 256;
            let residual = clipped - batch * 256;
            for h in hist.iter_mut() {
                *h += batch;
            }
            if let Some(step) = 256usize.checked_div(residual) {
                let step = step.max(1);
                let mut left = residual;
                let mut i = 0;
                while i < 256 && left > 0 {
                    hist[i] += 1;
                    left -= 1;
                    i += step;
                }
            }
            let lut = &mut luts[ty * tiles_x + tx];
            let mut sum = 0;
            for (v, h) in hist.iter().enumerate() {
                sum += h;
                lut[v] = (sum as f64 * lut_scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let inv_th = 1.0 / th as f64;
    let inv_tw = 1.0 / tw as f64;
    let mut out = vec![0u8; height * width];
    for y in 0..height {
        let tyf = y as f64 * inv_th - 0.5;
        let ty1 = tyf.floor() as isize;
        let ya = tyf - ty1 as f64;
        let ty2 = (ty1 + 1).min(tiles_y as isize - 1).max(0) as usize;
        let ty1 = ty1.max(0) as usize;
        for x in 0..width {
            let txf = x as f64 * inv_tw - 0.5;
            let tx1 = txf.floor() as isize;
            let xa = txf - tx1 as f64;
            let tx2 = (tx1 + 1).min(tiles_x as isize - 1).max(0) as usize;
            let tx1 = tx1.max(0) as usize;
            let v = plane[y * width + x] as usize;
            let l = |ty: usize, tx: usize| luts[ty * tiles_x + tx][v] as f64;
            let res = (l(ty1, tx1) * (1.0 - xa) + l(ty1, tx2) * xa) * (1.0 - ya)
                + (l(ty2, tx1) * (1.0 - xa) + l(ty2, tx2) * xa) * ya;
            out[y * width + x] = res.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// CLAHE on a `1 x C x H x W` image in the 0..=255 range.
///
/// Single-channel images are equalized directly. Three-channel images are
/// equalized on their BT.601 luma with the chroma offsets kept.
pub fn clahe(image: &Tensor, clip_limit: f64, tiles: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::dims(format!(
            "clahe expects a single 1- or 3-channel image, got {:?}",
            image.dims()
        )));
    }
    let hw = h * w;
    let d = image.data();
    if c == 1 {
        let plane: Vec<u8> = d.iter().map(|&v| to_u8(v)).collect();
        let out = clahe_plane(&plane, h, w, clip_limit, tiles)?;
        return Tensor::new(vec![1, 1, h, w], out.into_iter().map(f64::from).collect());
    }

    let (r, g, b) = (&d[..hw], &d[hw..2 * hw], &d[2 * hw..]);
    let luma: Vec<f64> = (0..hw)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    let plane: Vec<u8> = luma.iter().map(|&v| to_u8(v)).collect();
    let eq = clahe_plane(&plane, h, w, clip_limit, tiles)?;
    let mut out = vec![0.0; 3 * hw];
    for i in 0..hw {
        let shift = eq[i] as f64 - luma[i];
        for ch in 0..3 {
            out[ch * hw + i] = to_u8(d[ch * hw + i] + shift) as f64;
        }
    }
    Tensor::new(vec![1, 3, h, w], out)
}
