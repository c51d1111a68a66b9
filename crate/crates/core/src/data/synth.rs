//! Deterministic synthetic inspection scenes with exact ground truth.
//!
//! A scene is a textured coating background with irregular blobs for every
//! other class, a lens-cover occlusion ring, uneven illumination, sensor
//! noise and bright dust streaks that do not change any label.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clahe, mix_seed, ClassTaxonomy, LabeledSample, DEFAULT_CLIP_LIMIT, DEFAULT_TILES};
use crate::error::{Error, Result};
use crate::loss::PixelTargets;
use crate::tensor::Tensor;

/// Appearance and shape statistics of one class's blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobStyle {
    /// Inclusive range for the number of seed blobs; `(0, 0)` disables the
    /// class.
    pub count: (usize, usize),
    /// Axis-ratio range of the blob ellipse.
    pub aspect: (f64, f64),
    /// Boundary wobble amplitude, 0 for clean ellipses.
    pub roughness: f64,
    pub color: [f64; 3],
    /// Std of a per-blob color offset.
    pub color_jitter: f64,
    /// Std of per-pixel speckle inside the blob.
    pub texture: f64,
}

impl Default for BlobStyle {
    fn default() -> Self {
        BlobStyle {
            count: (1, 3),
            aspect: (0.5, 2.0),
            roughness: 0.3,
            color: [100.0, 100.0, 100.0],
            color_jitter: 6.0,
            texture: 6.0,
        }
    }
}

fn style(count: (usize, usize), aspect: (f64, f64), roughness: f64, color: [f64; 3], jitter: f64, texture: f64) -> BlobStyle {
    BlobStyle {
        count,
        aspect,
        roughness,
        color,
        color_jitter: jitter,
        texture,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub taxonomy: ClassTaxonomy,
    /// Share of all pixels per class; the remainder becomes the occluded
    /// (invalid) lens-cover region. Class 0 is the background and fills
    /// whatever the other classes leave.
    pub target_fractions: Vec<f64>,
    pub blobs: Vec<BlobStyle>,
    /// Share of pixels painted as low-confidence corrosion; resolved by the
    /// taxonomy's noisy-corroded policy.
    pub noisy_corroded_fraction: f64,
    /// Std of additive sensor noise.
    pub noise_level: f64,
    /// Strength of the uneven lighting falloff, 0..1.
    pub illumination: f64,
    /// Mean number of dust streaks per image.
    pub dust_streak_rate: f64,
    pub dust_color: [f64; 3],
    /// Mean number of reflective glare patches per image. They are tinted
    /// like corrosion but leave labels untouched.
    pub glare_rate: f64,
    pub glare_color: [f64; 3],
    /// Run CLAHE on the rendered image.
    pub preprocess: bool,
    pub clahe_clip_limit: f64,
    pub clahe_tiles: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            taxonomy: ClassTaxonomy::default(),
            target_fractions: vec![0.50, 0.12, 0.07, 0.03, 0.06, 0.05],
            blobs: vec![
                style((0, 0), (1.0, 1.0), 0.0, [95.0, 95.0, 90.0], 4.0, 6.0),
                style((1, 3), (0.5, 2.0), 0.3, [68.0, 72.0, 84.0], 6.0, 5.0),
                style((2, 5), (0.4, 2.5), 0.45, [138.0, 90.0, 66.0], 12.0, 14.0),
                style((3, 8), (0.85, 1.15), 0.05, [165.0, 160.0, 150.0], 6.0, 4.0),
                style((1, 2), (0.3, 3.0), 0.3, [70.0, 100.0, 86.0], 6.0, 5.0),
                style((1, 3), (0.5, 2.0), 0.4, [122.0, 106.0, 94.0], 10.0, 10.0),
            ],
            noisy_corroded_fraction: 0.0,
            noise_level: 6.0,
            illumination: 0.35,
            dust_streak_rate: 3.0,
            dust_color: [178.0, 122.0, 86.0],
            glare_rate: 2.0,
            glare_color: [160.0, 98.0, 70.0],
            preprocess: true,
            clahe_clip_limit: DEFAULT_CLIP_LIMIT,
            clahe_tiles: DEFAULT_TILES,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn invalid_fraction(&self) -> f64 {
        (1.0 - self.target_fractions.iter().sum::<f64>() - self.noisy_corroded_fraction).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        let c = self.classes();
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.target_fractions.len() != c || self.blobs.len() != c {
            return Err(Error::InfeasibleFractions(format!(
                "{} fractions and {} blob styles for {c} classes",
                self.target_fractions.len(),
                self.blobs.len()
            )));
        }
        if self
            .target_fractions
            .iter()
            .chain(std::iter::once(&self.noisy_corroded_fraction))
            .any(|f| !(*f >= 0.0 && f.is_finite()))
        {
            return Err(Error::InfeasibleFractions("fractions must be non-negative".into()));
        }
        let sum: f64 = self.target_fractions.iter().sum::<f64>() + self.noisy_corroded_fraction;
        if sum > 1.0 + 1e-9 {
            return Err(Error::InfeasibleFractions(format!("fractions sum to {sum} > 1")));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.count.0 > b.count.1 || b.aspect.0 <= 0.0 || b.aspect.0 > b.aspect.1 {
                return Err(Error::Config(format!("blob style {i} has an inverted range")));
            }
        }
        Ok(())
    }
}

const BACKGROUND: u8 = 0;
const UNPAINTED: u8 = u8::MAX;
const NOISY: u8 = u8::MAX - 1;

struct Canvas {
    h: usize,
    w: usize,
    /// Class per pixel, or `NOISY`; `UNPAINTED` until assigned.
    label: Vec<u8>,
    valid: Vec<bool>,
    /// Blob index per pixel for per-blob color offsets.
    blob: Vec<u32>,
}

impl Canvas {
    fn free(&self, i: usize) -> bool {
        self.valid[i] && self.label[i] == UNPAINTED
    }
}

/// Grows one irregular blob outward from its center, painting at most
/// `budget` free pixels. Returns how many were painted.
#[allow(clippy::too_many_arguments)]
fn grow_blob(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    style: &BlobStyle,
    code: u8,
    blob_id: u32,
    area: f64,
    budget: usize,
) -> usize {
    let free: Vec<usize> = (0..canvas.h * canvas.w).filter(|&i| canvas.free(i)).collect();
    if free.is_empty() || budget == 0 {
        return 0;
    }
    let center = free[rng.random_range(0..free.len())];
    let (cy, cx) = ((center / canvas.w) as f64, (center % canvas.w) as f64);
    let aspect = rng.random_range(style.aspect.0..=style.aspect.1);
    let r0 = (area / PI).sqrt().max(0.5);
    let (a, b) = (r0 * aspect.sqrt(), r0 / aspect.sqrt());
    let theta = rng.random_range(0.0..PI);
    let (ph1, ph2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let rough = style.roughness;
    let reach = a.max(b) * (1.0 + rough) + 1.0;

    let mut cand: Vec<(f64, usize)> = Vec::new();
    let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(canvas.h - 1));
    let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(canvas.w - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let i = y * canvas.w + x;
            if !canvas.free(i) {
                continue;
            }
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * theta.cos() + dy * theta.sin();
            let v = -dx * theta.sin() + dy * theta.cos();
            let phi = v.atan2(u);
            let wobble = 1.0 + rough * (0.6 * (3.0 * phi + ph1).sin() + 0.4 * (5.0 * phi + ph2).sin());
            let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt() / wobble.max(0.2);
            if rho <= 1.0 {
                cand.push((rho, i));
            }
        }
    }
    cand.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    let mut painted = 0;
    for (_, i) in cand.into_iter().take(budget) {
        canvas.label[i] = code;
        canvas.blob[i] = blob_id;
        painted += 1;
    }
    painted
}

fn paint_class(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    style: &BlobStyle,
    code: u8,
    need: usize,
    next_blob: &mut u32,
) -> usize {
    if need == 0 || style.count.1 == 0 {
        return 0;
    }
    let seeds = rng.random_range(style.count.0.max(1)..=style.count.1);
    let mut done = 0;
    for k in 0..seeds {
        let left = need - done;
        let share = left as f64 / (seeds - k) as f64 * rng.random_range(0.7..1.3);
        done += grow_blob(canvas, rng, style, code, *next_blob, share.max(1.0), left);
        *next_blob += 1;
    }
    // top up whatever blocked or clipped blobs left unpainted
    let mut attempts = 0;
    while (done as f64) < 0.98 * need as f64 && attempts < 200 {
        let left = need - done;
        let painted = grow_blob(canvas, rng, style, code, *next_blob, left as f64 * 1.3, left);
        *next_blob += 1;
        done += painted;
        attempts += 1;
    }
    done
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `floor(rate)` plus one more with probability `fract(rate)`.
fn draw_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    let rate = rate.max(0.0);
    rate.floor() as usize + usize::from(rng.random_bool(rate.fract()))
}

/// Renders one scene. Output depends on `config` (including its seed) only.
pub fn generate_scene(config: &SynthConfig) -> Result<LabeledSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let n = h * w;
    let classes = config.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut canvas = Canvas {
        h,
        w,
        label: vec![UNPAINTED; n],
        valid: vec![true; n],
        blob: vec![0; n],
    };

    // lens cover: the pixels farthest from a slightly off-center point
    let invalid = (config.invalid_fraction() * n as f64).round() as usize;
    if invalid > 0 {
        let cy = h as f64 / 2.0 + rng.random_range(-0.1..0.1) * h as f64;
        let cx = w as f64 / 2.0 + rng.random_range(-0.1..0.1) * w as f64;
        let mut order: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                ((y - cy).powi(2) / (h * h) as f64 + (x - cx).powi(2) / (w * w) as f64, i)
            })
            .collect();
        order.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        for &(_, i) in order.iter().take(invalid) {
            canvas.valid[i] = false;
        }
    }

    let mut next_blob = 1u32;
    for c in 1..classes {
        let need = (config.target_fractions[c] * n as f64).round() as usize;
        let got = paint_class(&mut canvas, &mut rng, &config.blobs[c], c as u8, need, &mut next_blob);
        if config.blobs[c].count.1 > 0 && need > 0 && (got as f64) < 0.8 * need as f64 {
            return Err(Error::InfeasibleFractions(format!(
                "class {c}: painted {got} of {need} pixels"
            )));
        }
    }
    let noisy_need = (config.noisy_corroded_fraction * n as f64).round() as usize;
    let corroded_style = config
        .taxonomy
        .index_of("corroded")
        .map(|i| config.blobs[i].clone())
        .unwrap_or_default();
    paint_class(&mut canvas, &mut rng, &corroded_style, NOISY, noisy_need, &mut next_blob);
    for i in 0..n {
        if canvas.valid[i] && canvas.label[i] == UNPAINTED {
            canvas.label[i] = BACKGROUND;
        }
    }

    // per-blob color offsets
    let mut offsets = vec![[0.0; 3]; next_blob as usize];
    for off in offsets.iter_mut() {
        for v in off.iter_mut() {
            *v = normal(&mut rng);
        }
    }

    // lighting: falloff away from a random light position
    let (ly, lx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let diag = ((h * h + w * w) as f64).sqrt();
    let bg = &config.blobs[0];
    let (f1, f2) = (rng.random_range(0.1..0.35), rng.random_range(0.1..0.35));
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));

    let mut img = vec![0.0; 3 * n];
    for i in 0..n {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut rgb = if !canvas.valid[i] {
            [12.0, 12.0, 14.0]
        } else {
            let code = canvas.label[i];
            let (st, blend) = if code == NOISY {
                (&corroded_style, 0.55)
            } else {
                (&config.blobs[code as usize], 1.0)
            };
            let off = offsets[canvas.blob[i] as usize];
            let speck = normal(&mut rng) * st.texture;
            let grain = if code == BACKGROUND {
                bg.texture * 0.6 * ((f1 * y + p1).sin() + (f2 * x + p2).sin())
            } else {
                0.0
            };
            let mut c = [0.0; 3];
            for k in 0..3 {
                let own = st.color[k] + off[k] * st.color_jitter + speck + grain;
                c[k] = blend * own + (1.0 - blend) * bg.color[k];
            }
            c
        };
        if canvas.valid[i] {
            let d = ((y - ly).powi(2) + (x - lx).powi(2)).sqrt() / diag;
            let light = 1.0 - config.illumination * d;
            for v in rgb.iter_mut() {
                *v *= light;
            }
        }
        for k in 0..3 {
            img[k * n + i] = rgb[k] + normal(&mut rng) * config.noise_level;
        }
    }

    // reflective glare: soft warm patches over whatever lies beneath
    for _ in 0..draw_count(&mut rng, config.glare_rate) {
        let (gy, gx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (a, b): (f64, f64) = (rng.random_range(2.5..6.0), rng.random_range(2.5..6.0));
        let theta = rng.random_range(0.0..PI);
        let strength = rng.random_range(0.5..0.85);
        let reach = a.max(b).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (yy, xx) = (gy.round() as isize + dy, gx.round() as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let i = yy as usize * w + xx as usize;
                if !canvas.valid[i] {
                    continue;
                }
                let (fy, fx) = (yy as f64 - gy, xx as f64 - gx);
                let u = fx * theta.cos() + fy * theta.sin();
                let v = -fx * theta.sin() + fy * theta.cos();
                let rho2 = (u / a).powi(2) + (v / b).powi(2);
                if rho2 >= 1.0 {
                    continue;
                }
                let s = strength * (1.0 - rho2);
                let speck = normal(&mut rng) * 10.0;
                for k in 0..3 {
                    img[k * n + i] = (1.0 - s) * img[k * n + i] + s * (config.glare_color[k] + speck);
                }
            }
        }
    }

    // dust streaks: thin bright diagonal-ish lines, labels untouched
    let streaks = draw_count(&mut rng, config.dust_streak_rate);
    for _ in 0..streaks {
        let (sy, sx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let angle = PI / 2.0 + rng.random_range(-0.6..0.6);
        let len = rng.random_range(0.12..0.45) * h.max(w) as f64;
        let thick: f64 = rng.random_range(0.5..1.3);
        let strength = rng.random_range(0.45..0.8);
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / 2.0;
            let (py, px) = (sy + t * angle.sin(), sx + t * angle.cos());
            let r = thick.ceil() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = ((py.round() as isize + dy), (px.round() as isize + dx));
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if ((dy * dy + dx * dx) as f64).sqrt() > thick {
                        continue;
                    }
                    let i = yy as usize * w + xx as usize;
                    if !canvas.valid[i] {
                        continue;
                    }
                    for k in 0..3 {
                        img[k * n + i] = (1.0 - strength) * img[k * n + i] + strength * config.dust_color[k];
                    }
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }
    let mut image = Tensor::new(vec![1, 3, h, w], img)?;
    if config.preprocess {
        image = clahe(&image, config.clahe_clip_limit, config.clahe_tiles)?;
    }

    let noisy_label = config.taxonomy.resolve_noisy_corroded();
    let mut labels = vec![0u8; n];
    let mut valid = canvas.valid.clone();
    for i in 0..n {
        match canvas.label[i] {
            UNPAINTED => {}
            NOISY => match noisy_label {
                Some(l) => labels[i] = l,
                None => valid[i] = false,
            },
            l => labels[i] = l,
        }
        if !valid[i] {
            labels[i] = 0;
        }
    }
    LabeledSample::new(image, PixelTargets::new(1, h, w, labels, valid)?)
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// `n_train` and `n_test` scenes with per-sample seeds drawn from disjoint
/// streams of `config.seed`.
pub fn build_dataset(
    config: &SynthConfig,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument {
            arg: "n_train/n_test",
            reason: "both splits need at least one sample".into(),
        });
    }
    let make = |stream: u64, count: usize| -> Result<Vec<LabeledSample>> {
        (0..count)
            .map(|i| {
                let cfg = SynthConfig {
                    seed: mix_seed(config.seed, stream, i as u64),
                    ..config.clone()
                };
                generate_scene(&cfg)
            })
            .collect()
    };
    Ok((make(TRAIN_STREAM, n_train)?, make(TEST_STREAM, n_test)?))
}
