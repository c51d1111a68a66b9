//! Labeled images: the class taxonomy, preprocessing, augmentation, the
//! synthetic scene generator and on-disk I/O.

mod augment;
mod clahe;
mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::PixelTargets;
use crate::tensor::Tensor;

pub use augment::{augment, augment_traced, AppliedAugment, AugmentConfig};
pub use clahe::{clahe, clahe_plane, DEFAULT_CLIP_LIMIT, DEFAULT_TILES};
pub use io::{
    load_dataset, load_mask_png, load_png, save_dataset, save_mask_png, save_png, Manifest,
    ManifestEntry, Split, MANIFEST_FILE,
};
pub use synth::{build_dataset, generate_scene, BlobStyle, SynthConfig};

/// Mask byte for pixels excluded from loss and metrics.
pub const INVALID_LABEL: u8 = 255;

/// What to do with regions labeled as corroded with low confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisyCorrodedPolicy {
    MergeToCorroded,
    MarkInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassTaxonomy {
    pub names: Vec<String>,
    pub noisy_corroded_policy: NoisyCorrodedPolicy,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        ClassTaxonomy {
            names: ["coating", "wet_coating", "corroded", "rivet", "water", "others"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            noisy_corroded_policy: NoisyCorrodedPolicy::MergeToCorroded,
        }
    }
}

impl ClassTaxonomy {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.names.len()) {
            return Err(Error::Config(format!(
                "taxonomy needs 2..=255 classes, has {}",
                self.names.len()
            )));
        }
        for (i, n) in self.names.iter().enumerate() {
            if self.names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(())
    }

    /// Label assigned to a noisy-corroded pixel, or `None` if it is to be
    /// excluded.
    pub fn resolve_noisy_corroded(&self) -> Option<u8> {
        match self.noisy_corroded_policy {
            NoisyCorrodedPolicy::MergeToCorroded => self.index_of("corroded").map(|i| i as u8),
            NoisyCorrodedPolicy::MarkInvalid => None,
        }
    }
}

/// One RGB image (`1 x 3 x H x W`, values 0..=255) with its per-pixel
/// labels and validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor,
    pub targets: PixelTargets,
}

impl LabeledSample {
    pub fn new(image: Tensor, targets: PixelTargets) -> Result<Self> {
        let (n, _, h, w) = image.dims4()?;
        if n != 1 || targets.batch != 1 || (targets.height, targets.width) != (h, w) {
            return Err(Error::dims(format!(
                "image {:?} with {}x{}x{} targets",
                image.dims(),
                targets.batch,
                targets.height,
                targets.width
            )));
        }
        Ok(LabeledSample { image, targets })
    }

    pub fn height(&self) -> usize {
        self.targets.height
    }

    pub fn width(&self) -> usize {
        self.targets.width
    }

    /// Mask bytes: class index, or [`INVALID_LABEL`].
    pub fn mask_bytes(&self) -> Vec<u8> {
        self.targets
            .labels
            .iter()
            .zip(&self.targets.valid)
            .map(|(&l, &v)| if v { l } else { INVALID_LABEL })
            .collect()
    }

    /// Per-class counts over valid pixels.
    pub fn class_histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for (&l, &v) in self.targets.labels.iter().zip(&self.targets.valid) {
            if v && (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Scales a 0..=255 image to the network's 0..=1 input range.
pub fn network_input(image: &Tensor) -> Tensor {
    image.map(|v| v / 255.0)
}

/// Stacks samples into a network batch and matching targets.
pub fn collate(samples: &[&LabeledSample]) -> Result<(Tensor, PixelTargets)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let targets: Vec<&PixelTargets> = samples.iter().map(|s| &s.targets).collect();
    Ok((
        network_input(&Tensor::stack_batch(&images)?),
        PixelTargets::stack(&targets)?,
    ))
}

/// Per-pixel visibility; `false` marks pixels hidden by the lens cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub visible: Vec<bool>,
}

impl OcclusionMask {
    /// Any nonzero byte is visible.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::dims(format!(
                "{} mask bytes for {height}x{width}",
                bytes.len()
            )));
        }
        Ok(OcclusionMask {
            height,
            width,
            visible: bytes.iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn popcount(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Marks occluded pixels invalid; pixels already invalid stay invalid.
pub fn apply_occlusion_mask(sample: &LabeledSample, mask: &OcclusionMask) -> Result<LabeledSample> {
    if (mask.height, mask.width) != (sample.height(), sample.width()) {
        return Err(Error::dims(format!(
            "occlusion mask {}x{} for {}x{} image",
            mask.height,
            mask.width,
            sample.height(),
            sample.width()
        )));
    }
    let mut out = sample.clone();
    for (v, &vis) in out.targets.valid.iter_mut().zip(&mask.visible) {
        *v = *v && vis;
    }
    Ok(out)
}

/// SplitMix64 finalizer; derives independent per-item seeds from a base
/// seed without any shared RNG state.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{compute_loss, LossConfig};

    fn sample() -> LabeledSample {
        let targets = PixelTargets::dense(1, 2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        LabeledSample::new(Tensor::full(&[1, 3, 2, 3], 100.0), targets).unwrap()
    }

    #[test]
    fn default_taxonomy() {
        let t = ClassTaxonomy::default();
        t.validate().unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.index_of("corroded"), Some(2));
        assert_eq!(t.resolve_noisy_corroded(), Some(2));
        let strict = ClassTaxonomy {
            noisy_corroded_policy: NoisyCorrodedPolicy::MarkInvalid,
            ..t.clone()
        };
        assert_eq!(strict.resolve_noisy_corroded(), None);
        let dup = ClassTaxonomy {
            names: vec!["a".into(), "a".into()],
            ..t
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn all_visible_mask_is_identity() {
        let s = sample();
        let m = OcclusionMask::from_bytes(2, 3, &[1; 6]).unwrap();
        assert_eq!(apply_occlusion_mask(&s, &m).unwrap(), s);
    }

    #[test]
    fn fully_occluded_sample_has_no_loss() {
        let s = sample();
        let m = OcclusionMask::from_bytes(2, 3, &[0; 6]).unwrap();
        let masked = apply_occlusion_mask(&s, &m).unwrap();
        let logits = Tensor::zeros(&[1, 3, 2, 3]);
        assert!(matches!(
            compute_loss(&logits, &masked.targets, &LossConfig::sce()),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn valid_count_equals_popcount() {
        let s = sample();
        let bytes = [0, 255, 3, 0, 1, 1];
        let m = OcclusionMask::from_bytes(2, 3, &bytes).unwrap();
        let brute = bytes.iter().filter(|&&b| b != 0).count();
        assert_eq!(apply_occlusion_mask(&s, &m).unwrap().targets.valid_count(), brute);
        assert_eq!(m.popcount(), brute);
        let wrong = OcclusionMask::from_bytes(3, 2, &bytes).unwrap();
        assert!(apply_occlusion_mask(&s, &wrong).is_err());
    }

    #[test]
    fn mixed_seeds_differ_by_stream_and_index() {
        let a = mix_seed(7, 0, 0);
        assert_ne!(a, mix_seed(7, 1, 0));
        assert_ne!(a, mix_seed(7, 0, 1));
        assert_ne!(a, mix_seed(8, 0, 0));
        assert_eq!(a, mix_seed(7, 0, 0));
    }
}
