//! Random geometric and photometric augmentation of labeled samples.
//!
//! Geometry (rotation about the image center, then an integer shift) moves
//! image and labels together: images are resampled bilinearly, labels by
//! nearest neighbour, and pixels pulled from outside the source become
//! invalid. Photometric changes (gamma, brightness, per-channel color
//! offset) touch the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, LabeledSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const AUGMENT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub rotation_prob: f64,
    /// Maximum absolute shift in pixels along each axis (crop and pad).
    pub shift_px: usize,
    pub shift_prob: f64,
    pub gamma: (f64, f64),
    pub gamma_prob: f64,
    /// Maximum absolute additive brightness change in 0..=255 units.
    pub brightness: f64,
    pub brightness_prob: f64,
    /// Maximum absolute per-channel offset.
    pub color_shift: f64,
    pub color_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg: 15.0,
            rotation_prob: 0.5,
            shift_px: 8,
            shift_prob: 0.5,
            gamma: (0.7, 1.4),
            gamma_prob: 0.5,
            brightness: 25.0,
            brightness_prob: 0.5,
            color_shift: 10.0,
            color_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration that returns every sample unchanged.
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.rotation_prob,
            self.shift_prob,
            self.gamma_prob,
            self.brightness_prob,
            self.color_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument {
                arg: "augment",
                reason: "probabilities must lie in [0, 1]".into(),
            });
        }
        if !(self.rotation_deg >= 0.0 && self.brightness >= 0.0 && self.color_shift >= 0.0) {
            return Err(Error::InvalidArgument {
                arg: "augment",
                reason: "magnitudes must be non-negative".into(),
            });
        }
        if !(self.gamma.0 > 0.0 && self.gamma.0 <= self.gamma.1) {
            return Err(Error::InvalidArgument {
                arg: "augment.gamma",
                reason: format!("need 0 < lo <= hi, got {:?}", self.gamma),
            });
        }
        Ok(())
    }
}

/// The transform actually drawn for one call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppliedAugment {
    /// Rotation in radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    /// `(dy, dx)` shift applied after rotation.
    pub shift: (isize, isize),
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
}

impl AppliedAugment {
    fn identity() -> Self {
        AppliedAugment {
            gamma: 1.0,
            ..Default::default()
        }
    }

    /// Source coordinates `(y, x)` that output pixel `(y, x)` is sampled from.
    pub fn source_coords(&self, y: usize, x: usize, height: usize, width: usize) -> (f64, f64) {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let ry = y as f64 - self.shift.0 as f64 - cy;
        let rx = x as f64 - self.shift.1 as f64 - cx;
        let (s, c) = self.rotation.sin_cos();
        // inverse rotation
        (cy + c * ry - s * rx, cx + s * ry + c * rx)
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.rotation == 0.0 && self.shift == (0, 0)
    }

    fn photometric(&self, v: f64, channel: usize) -> f64 {
        let g = 255.0 * (v.clamp(0.0, 255.0) / 255.0).powf(self.gamma);
        (g + self.brightness + self.color[channel]).clamp(0.0, 255.0)
    }
}

fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AppliedAugment {
    let mut a = AppliedAugment::identity();
    if rng.random_bool(cfg.rotation_prob) && cfg.rotation_deg > 0.0 {
        a.rotation = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    }
    if rng.random_bool(cfg.shift_prob) && cfg.shift_px > 0 {
        let m = cfg.shift_px as i64;
        a.shift = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
    }
    if rng.random_bool(cfg.gamma_prob) {
        a.gamma = rng.random_range(cfg.gamma.0..=cfg.gamma.1);
    }
    if rng.random_bool(cfg.brightness_prob) && cfg.brightness > 0.0 {
        a.brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
    }
    if rng.random_bool(cfg.color_prob) && cfg.color_shift > 0.0 {
        for c in a.color.iter_mut() {
            *c = rng.random_range(-cfg.color_shift..=cfg.color_shift);
        }
    }
    a
}

fn apply(sample: &LabeledSample, a: &AppliedAugment) -> Result<LabeledSample> {
    let (_, channels, h, w) = sample.image.dims4()?;
    let n = h * w;
    let src = sample.image.data();
    let mut img = vec![0.0; channels * n];
    let mut labels = vec![0u8; n];
    let mut valid = vec![false; n];
    let geometric = !a.is_geometric_identity();
    for y in 0..h {
        for x in 0..w {
            let o = y * w + x;
            let (sy, sx) = if geometric {
                a.source_coords(y, x, h, w)
            } else {
                (y as f64, x as f64)
            };
            let (ny, nx) = (sy.round(), sx.round());
            if ny < 0.0 || nx < 0.0 || ny > (h - 1) as f64 || nx > (w - 1) as f64 {
                continue;
            }
            let ni = ny as usize * w + nx as usize;
            labels[o] = sample.targets.labels[ni];
            valid[o] = sample.targets.valid[ni];
            let fy = sy.clamp(0.0, (h - 1) as f64);
            let fx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..channels {
                let p = &src[c * n..(c + 1) * n];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                img[c * n + o] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    for c in 0..channels {
        for v in &mut img[c * n..(c + 1) * n] {
            *v = a.photometric(*v, c.min(2));
        }
    }
    let mut targets = sample.targets.clone();
    targets.labels = labels;
    targets.valid = valid;
    LabeledSample::new(Tensor::new(sample.image.dims().to_vec(), img)?, targets)
}

/// Augments `sample`; the result depends only on `(cfg, draw)`.
pub fn augment(sample: &LabeledSample, cfg: &AugmentConfig, draw: u64) -> Result<LabeledSample> {
    augment_traced(sample, cfg, draw).map(|(s, _)| s)
}

/// Like [`augment`], also returning the transform that was drawn.
pub fn augment_traced(
    sample: &LabeledSample,
    cfg: &AugmentConfig,
    draw_index: u64,
) -> Result<(LabeledSample, AppliedAugment)> {
    cfg.validate()?;
    if cfg.shift_px >= sample.height().min(sample.width()) {
        return Err(Error::InvalidArgument {
            arg: "augment.shift_px",
            reason: format!(
                "shift {} does not fit a {}x{} image",
                cfg.shift_px,
                sample.height(),
                sample.width()
            ),
        });
    }
    if !cfg.enabled {
        return Ok((sample.clone(), AppliedAugment::identity()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, AUGMENT_STREAM, draw_index));
    let a = draw(cfg, &mut rng);
    Ok((apply(sample, &a)?, a))
}
