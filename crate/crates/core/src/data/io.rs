//! PNG images, single-byte label masks and the dataset manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledSample, INVALID_LABEL};
use crate::error::{Error, Result};
use crate::loss::PixelTargets;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Paths relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub invalid_label: u8,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| png_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

/// Writes a `1 x 3 x H x W` (or `1 x 1 x H x W`) image with values in
/// 0..=255 as an 8-bit PNG. Values are rounded and clamped.
pub fn save_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (n, c, h, w) = image.dims4()?;
    let color = match (n, c) {
        (1, 3) => png::ColorType::Rgb,
        (1, 1) => png::ColorType::Grayscale,
        _ => return Err(Error::dims(format!("cannot save {:?} as PNG", image.dims()))),
    };
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for k in 0..c {
            bytes.push(d[k * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    write_png(path, w, h, color, &bytes)
}

/// Reads an 8-bit RGB, RGBA or grayscale PNG as a `1 x 3 x H x W` tensor.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = read_png(path)?;
    if img.depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", img.depth)));
    }
    let stride = match img.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    let plane = img.height * img.width;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let px = &img.bytes[i * stride..];
        for k in 0..3 {
            data[k * plane + i] = f64::from(if stride >= 3 { px[k] } else { px[0] });
        }
    }
    Tensor::new(vec![1, 3, img.height, img.width], data)
}

pub fn save_mask_png(path: impl AsRef<Path>, height: usize, width: usize, mask: &[u8]) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::dims(format!("{} mask bytes for {height}x{width}", mask.len())));
    }
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, mask)
}

/// Reads a mask PNG: exactly one byte per pixel, `(height, width, bytes)`.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = read_png(path)?;
    if img.color != png::ColorType::Grayscale || img.depth != png::BitDepth::Eight {
        return Err(Error::NotEightBitMask {
            path: path.to_path_buf(),
            found: format!("{:?} at {:?}", img.color, img.depth),
        });
    }
    Ok((img.height, img.width, img.bytes))
}

fn targets_from_mask(path: &Path, h: usize, w: usize, bytes: Vec<u8>, classes: usize) -> Result<PixelTargets> {
    let mut labels = bytes;
    let mut valid = vec![true; labels.len()];
    for (l, v) in labels.iter_mut().zip(valid.iter_mut()) {
        if *l == INVALID_LABEL {
            *l = 0;
            *v = false;
        } else if *l as usize >= classes {
            return Err(Error::Png {
                path: path.to_path_buf(),
                reason: Error::LabelOutOfRange {
                    label: *l as usize,
                    classes,
                }
                .to_string(),
            });
        }
    }
    PixelTargets::new(1, h, w, labels, valid)
}

/// Writes `images/`, `masks/` and the manifest under `dir`.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    classes: &[String],
    train: &[LabeledSample],
    test: &[LabeledSample],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, samples, tag) in [(Split::Train, train, "train"), (Split::Test, test, "test")] {
        for (i, s) in samples.iter().enumerate() {
            let image = PathBuf::from("images").join(format!("{tag}_{i:04}.png"));
            let mask = PathBuf::from("masks").join(format!("{tag}_{i:04}.png"));
            save_png(dir.join(&image), &s.image)?;
            save_mask_png(dir.join(&mask), s.height(), s.width(), &s.mask_bytes())?;
            entries.push(ManifestEntry { image, mask, split });
        }
    }
    let manifest = Manifest {
        classes: classes.to_vec(),
        invalid_label: INVALID_LABEL,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a dataset written by [`save_dataset`] (or laid out by hand with
/// the same manifest), returning `(manifest, train, test)`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<LabeledSample>, Vec<LabeledSample>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.invalid_label != INVALID_LABEL {
        return Err(Error::Config(format!(
            "manifest invalid label {} is not {INVALID_LABEL}",
            manifest.invalid_label
        )));
    }
    let classes = manifest.classes.len();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &manifest.entries {
        let image = load_png(dir.join(&e.image))?;
        let mask_path = dir.join(&e.mask);
        let (h, w, bytes) = load_mask_png(&mask_path)?;
        let targets = targets_from_mask(&mask_path, h, w, bytes, classes)?;
        let sample = LabeledSample::new(image, targets)?;
        match e.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((manifest, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, ClassTaxonomy, SynthConfig};

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::from_fn(&[1, 3, 5, 7], |i| (i * 13 % 256) as f64);
        save_png(&p, &t).unwrap();
        assert_eq!(load_png(&p).unwrap(), t);
    }

    #[test]
    fn mask_round_trip_and_depth_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m: Vec<u8> = (0..12).map(|i| if i == 5 { 255 } else { i % 6 }).collect();
        save_mask_png(&p, 3, 4, &m).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), (3, 4, m));

        let rgb = dir.path().join("rgb.png");
        save_png(&rgb, &Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(matches!(load_mask_png(&rgb), Err(Error::NotEightBitMask { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_png("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            height: 24,
            width: 24,
            ..Default::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&SynthConfig { seed: 5, ..cfg.clone() }).unwrap();
        let names = ClassTaxonomy::default().names;
        let m = save_dataset(dir.path(), &names, std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (1, 1));
        let (m2, train, test) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(train, vec![a]);
        assert_eq!(test, vec![b]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        save_mask_png(&p, 1, 2, &[0, 9]).unwrap();
        let (h, w, bytes) = load_mask_png(&p).unwrap();
        assert!(targets_from_mask(&p, h, w, bytes, 6).is_err());
    }
}
