//! Per-pixel softmax losses for class-imbalanced segmentation.
//!
//! All four kinds share one per-pixel term
//! `-m(p_t) * ln(p_t)` where `p_t` is the softmax probability of the true
//! class and the modulating factor `m` is `1`, `w_t`, `(1 - p_t)^gamma` or
//! `w_t * (1 - p_t)^gamma`. The batch loss is the mean over valid pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "SCE")]
    Sce,
    #[serde(rename = "W_SCE")]
    WeightedSce,
    #[serde(rename = "FOCAL")]
    Focal,
    #[serde(rename = "W_FOCAL")]
    WeightedFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Sce,
        LossKind::WeightedSce,
        LossKind::Focal,
        LossKind::WeightedFocal,
    ];

    pub fn is_weighted(self) -> bool {
        matches!(self, LossKind::WeightedSce | LossKind::WeightedFocal)
    }

    pub fn is_focal(self) -> bool {
        matches!(self, LossKind::Focal | LossKind::WeightedFocal)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Sce => "SCE",
            LossKind::WeightedSce => "W-SCE",
            LossKind::Focal => "Focal",
            LossKind::WeightedFocal => "W-Focal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    /// One weight per class; only read by the weighted kinds.
    pub class_weights: Vec<f64>,
    /// Rescale weights so the smallest is 1 before use.
    pub normalize_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Sce,
            gamma: 2.0,
            class_weights: INSPECTION_WEIGHTS.to_vec(),
            normalize_weights: false,
        }
    }
}

/// Hand-tuned weights for the six-class inspection taxonomy: coating,
/// wet coating, corroded, rivet, water, others.
pub const INSPECTION_WEIGHTS: [f64; 6] = [1.0, 1.0, 10.0, 5.0, 1.0, 1.0];

impl LossConfig {
    pub fn new(kind: LossKind, gamma: f64, class_weights: Vec<f64>) -> Self {
        LossConfig {
            kind,
            gamma,
            class_weights,
            normalize_weights: false,
        }
    }

    pub fn sce() -> Self {
        LossConfig::new(LossKind::Sce, 0.0, Vec::new())
    }

    pub fn focal(gamma: f64) -> Self {
        LossConfig::new(LossKind::Focal, gamma, Vec::new())
    }

    pub fn weighted_sce(weights: Vec<f64>) -> Self {
        LossConfig::new(LossKind::WeightedSce, 0.0, weights)
    }

    pub fn weighted_focal(gamma: f64, weights: Vec<f64>) -> Self {
        LossConfig::new(LossKind::WeightedFocal, gamma, weights)
    }

    /// Short human-readable name, e.g. `W-Focal(γ=2)`.
    pub fn name(&self) -> String {
        if self.kind.is_focal() {
            format!("{}(γ={})", self.kind.label(), self.gamma)
        } else {
            self.kind.label().to_string()
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "gamma",
                reason: format!("must be a finite value >= 0, got {}", self.gamma),
            });
        }
        if self.kind.is_weighted() {
            if self.class_weights.len() != classes {
                return Err(Error::InvalidArgument {
                    arg: "class_weights",
                    reason: format!(
                        "{} weights for {classes} classes",
                        self.class_weights.len()
                    ),
                });
            }
            if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(Error::InvalidArgument {
                    arg: "class_weights",
                    reason: "weights must be positive and finite".into(),
                });
            }
        }
        Ok(())
    }

    /// Per-class multipliers actually applied (all ones for unweighted kinds).
    pub fn effective_weights(&self, classes: usize) -> Vec<f64> {
        if !self.kind.is_weighted() {
            return vec![1.0; classes];
        }
        if self.normalize_weights {
            let min = self
                .class_weights
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            self.class_weights.iter().map(|w| w / min).collect()
        } else {
            self.class_weights.clone()
        }
    }

    fn focal_gamma(&self) -> f64 {
        if self.kind.is_focal() {
            self.gamma
        } else {
            0.0
        }
    }
}

/// Per-pixel class indices and validity flags for a batch, `batch x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTargets {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl PixelTargets {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        labels: Vec<u8>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * height * width;
        if labels.len() != n || valid.len() != n {
            return Err(Error::dims(format!(
                "targets {batch}x{height}x{width} with {} labels and {} flags",
                labels.len(),
                valid.len()
            )));
        }
        Ok(PixelTargets {
            batch,
            height,
            width,
            labels,
            valid,
        })
    }

    /// All pixels valid.
    pub fn dense(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        Self::new(batch, height, width, labels, vec![true; n])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn pixels_per_item(&self) -> usize {
        self.height * self.width
    }

    /// Concatenates targets along the batch axis.
    pub fn stack(items: &[&PixelTargets]) -> Result<PixelTargets> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.height, first.width);
        let mut labels = Vec::new();
        let mut valid = Vec::new();
        let mut batch = 0;
        for t in items {
            if (t.height, t.width) != (h, w) {
                return Err(Error::dims(format!(
                    "stacking {}x{} targets with {h}x{w}",
                    t.height, t.width
                )));
            }
            batch += t.batch;
            labels.extend_from_slice(&t.labels);
            valid.extend_from_slice(&t.valid);
        }
        PixelTargets::new(batch, h, w, labels, valid)
    }
}

/// The per-pixel loss term for true-class probability `p_true`.
pub fn pixel_loss(p_true: f64, gamma: f64, weight: f64) -> f64 {
    let p = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -weight * (1.0 - p).powf(gamma) * p.ln()
}

/// Derivative of [`pixel_loss`] with respect to `p_true`. Zero where the
/// clamp is active.
fn pixel_loss_slope(p_true: f64, gamma: f64, weight: f64) -> f64 {
    if p_true <= PROB_CLAMP || p_true >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    let q = 1.0 - p_true;
    let focal_term = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p_true.ln()
    };
    weight * (focal_term - q.powf(gamma) / p_true)
}

/// Mean loss over valid pixels and its gradient with respect to `logits`.
///
/// `logits` is `batch x C x H x W`. Invalid pixels contribute nothing to
/// the loss and receive a zero gradient.
pub fn compute_loss(
    logits: &Tensor,
    targets: &PixelTargets,
    config: &LossConfig,
) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = logits.dims4()?;
    if (n, h, w) != (targets.batch, targets.height, targets.width) {
        return Err(Error::dims(format!(
            "logits {:?} vs targets {}x{}x{}",
            logits.dims(),
            targets.batch,
            targets.height,
            targets.width
        )));
    }
    config.validate(c)?;
    let weights = config.effective_weights(c);
    let gamma = config.focal_gamma();

    let mut count = 0usize;
    for (&label, &valid) in targets.labels.iter().zip(&targets.valid) {
        if !valid {
            continue;
        }
        if label as usize >= c {
            return Err(Error::LabelOutOfRange {
                label: label as usize,
                classes: c,
            });
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_n = 1.0 / count as f64;

    let probs = softmax_channels(logits)?;
    let p = probs.data();
    let hw = h * w;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for b in 0..n {
        let base = b * c * hw;
        for px in 0..hw {
            let idx = b * hw + px;
            if !targets.valid[idx] {
                continue;
            }
            let t = targets.labels[idx] as usize;
            let pt = p[base + t * hw + px];
            total += pixel_loss(pt, gamma, weights[t]);
            let slope = pixel_loss_slope(pt, gamma, weights[t]) * inv_n;
            if slope == 0.0 {
                continue;
            }
            for ch in 0..c {
                let pc = p[base + ch * hw + px];
                let delta = if ch == t { 1.0 } else { 0.0 };
                grad[base + ch * hw + px] = slope * pt * (delta - pc);
            }
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("compute_loss"));
    }
    Ok((
        loss,
        Tensor::new(logits.dims().to_vec(), grad)?.ensure_finite("compute_loss")?,
    ))
}

/// Inverse-frequency class weights, rescaled so the smallest weight is 1.
///
/// `histogram` may hold raw pixel counts or frequencies; it is normalized
/// first. Frequencies below `floor` (including empty classes) are treated
/// as `floor`.
pub fn class_weights_from_frequencies(histogram: &[f64], floor: f64) -> Result<Vec<f64>> {
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "floor",
            reason: format!("must be positive, got {floor}"),
        });
    }
    if histogram.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument {
            arg: "histogram",
            reason: "counts must be finite and non-negative".into(),
        });
    }
    let total: f64 = histogram.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "histogram",
            reason: "all class counts are zero".into(),
        });
    }
    let raw: Vec<f64> = histogram
        .iter()
        .map(|&v| 1.0 / (v / total).max(floor))
        .collect();
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(raw.into_iter().map(|w| w / min).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn one_pixel(logits: &[f64], label: u8) -> (Tensor, PixelTargets) {
        (
            Tensor::new(vec![1, logits.len(), 1, 1], logits.to_vec()).unwrap(),
            PixelTargets::dense(1, 1, 1, vec![label]).unwrap(),
        )
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_prediction_cross_entropy() {
        let (z, t) = one_pixel(&[0.0, 0.0], 0);
        let (loss, _) = compute_loss(&z, &t, &LossConfig::sce()).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma_two_at_half() {
        let (z, t) = one_pixel(&[0.0, 0.0], 0);
        let (loss, _) = compute_loss(&z, &t, &LossConfig::focal(2.0)).unwrap();
        // independent evaluation: (1 - 0.5)^2 * ln 2
        let oracle = 0.5f64 * 0.5 * 2f64.ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn weighted_sce_scales_by_true_class_weight() {
        let (z, t) = one_pixel(&[0.0, 0.0], 1);
        let (loss, _) = compute_loss(&z, &t, &LossConfig::weighted_sce(vec![1.0, 10.0])).unwrap();
        assert!((loss - 10.0 * LN_2).abs() < 1e-12);
        assert!((loss - 6.93147).abs() < 1e-5);
    }

    #[test]
    fn weighted_focal_scalar_case() {
        // softmax [ln 9, 0] -> [0.9, 0.1]
        let (z, t) = one_pixel(&[9f64.ln(), 0.0], 0);
        let cfg = LossConfig::weighted_focal(1.0, vec![10.0, 1.0]);
        let (loss, _) = compute_loss(&z, &t, &cfg).unwrap();
        let oracle = 10.0 * 0.1 * -(0.9f64.ln());
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn sce_gradient_is_p_minus_onehot() {
        let (z, t) = one_pixel(&[1.0, -0.5, 0.25], 2);
        let (_, g) = compute_loss(&z, &t, &LossConfig::sce()).unwrap();
        let p = softmax_channels(&z).unwrap();
        for c in 0..3 {
            let y = if c == 2 { 1.0 } else { 0.0 };
            assert!((g.data()[c] - (p.data()[c] - y)).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let z = Tensor::new(vec![1, 2, 1, 2], vec![0.3, 5.0, -0.2, -5.0]).unwrap();
        let t = PixelTargets::new(1, 1, 2, vec![0, 200], vec![true, false]).unwrap();
        let (loss, g) = compute_loss(&z, &t, &LossConfig::sce()).unwrap();
        let (z1, t1) = one_pixel(&[0.3, -0.2], 0);
        let (loss1, _) = compute_loss(&z1, &t1, &LossConfig::sce()).unwrap();
        assert_eq!(loss, loss1);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
    }

    #[test]
    fn error_paths() {
        let (z, _) = one_pixel(&[0.0, 0.0], 0);
        let none = PixelTargets::new(1, 1, 1, vec![0], vec![false]).unwrap();
        assert!(matches!(
            compute_loss(&z, &none, &LossConfig::sce()),
            Err(Error::NoValidPixels)
        ));
        let bad = PixelTargets::dense(1, 1, 1, vec![2]).unwrap();
        assert!(matches!(
            compute_loss(&z, &bad, &LossConfig::sce()),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let t = PixelTargets::dense(1, 1, 1, vec![0]).unwrap();
        assert!(compute_loss(&z, &t, &LossConfig::weighted_sce(vec![1.0; 3])).is_err());
        assert!(compute_loss(&z, &t, &LossConfig::focal(-1.0)).is_err());
        let t2 = PixelTargets::dense(1, 1, 2, vec![0, 0]).unwrap();
        assert!(matches!(
            compute_loss(&z, &t2, &LossConfig::sce()),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let (z, t) = one_pixel(&[40.0, 0.0, 0.0], 0);
        for cfg in [
            LossConfig::sce(),
            LossConfig::focal(2.0),
            LossConfig::weighted_sce(vec![10.0, 1.0, 1.0]),
            LossConfig::weighted_focal(0.5, vec![10.0, 1.0, 1.0]),
        ] {
            let (loss, _) = compute_loss(&z, &t, &cfg).unwrap();
            assert!(loss < 10.0 * 1.1 * PROB_CLAMP, "{} -> {loss}", cfg.name());
        }
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = class_weights_from_frequencies(&[0.5, 0.05], 1e-6).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 10.0).abs() < 1e-12);
        let w = class_weights_from_frequencies(&[7.0; 6], 1e-6).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let w = class_weights_from_frequencies(&[100.0, 0.0], 0.01).unwrap();
        assert!((w[1] - 100.0).abs() < 1e-9);
        assert!(class_weights_from_frequencies(&[0.0, 0.0], 0.01).is_err());
        assert!(class_weights_from_frequencies(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn manual_weight_set_accepted_verbatim() {
        let cfg = LossConfig::weighted_focal(2.0, INSPECTION_WEIGHTS.to_vec());
        cfg.validate(6).unwrap();
        assert_eq!(cfg.effective_weights(6), vec![1.0, 1.0, 10.0, 5.0, 1.0, 1.0]);
        let mut n = LossConfig::weighted_sce(vec![2.0, 20.0]);
        n.normalize_weights = true;
        assert_eq!(n.effective_weights(2), vec![1.0, 10.0]);
    }

    #[test]
    fn kind_serializes_with_config_names() {
        let s = serde_json::to_string(&LossKind::WeightedFocal).unwrap();
        assert_eq!(s, "\"W_FOCAL\"");
    }
}
