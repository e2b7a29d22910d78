//! Image ingestion, shot/test splits and PNG output.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::pretrain::{hex, ShotSet};

/// Label of the preprocessing applied to every loaded image.
pub fn preprocessing_recipe(resolution: usize) -> String {
    format!("center-crop, resize {resolution}x{resolution} (triangle), rgb8 -> [-1,1]")
}

/// One image prepared for the decoder: `3×R×R` in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Content digest (SHA-256 of the file bytes, or of the pixels for
    /// generated images).
    pub id: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Shot,
    Test,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub digest: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub preprocessing: String,
    /// Digest-ordered.
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<LabeledImage>,
}

/// A dataset divided into nested shot prefixes and a disjoint test set.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub manifest: DatasetManifest,
    pub shots: Vec<LabeledImage>,
    pub tests: Vec<LabeledImage>,
}

impl SplitDataset {
    /// The first `s` shots (shot sets for smaller `S` are prefixes of larger ones).
    pub fn shot_set(&self, s: usize) -> Result<ShotSet> {
        if s == 0 || s > self.shots.len() {
            return Err(Error::Config(format!(
                "requested {s} shots, {} available",
                self.shots.len()
            )));
        }
        let chosen = &self.shots[..s];
        ShotSet::new(
            chosen.iter().map(|i| i.tensor.clone()).collect(),
            chosen.iter().map(|i| i.id.clone()).collect(),
            self.manifest.preprocessing.clone(),
        )
    }
}

/// Center-crops to a square, resizes to `resolution` and maps `[0, 255]` to `[−1, 1]`.
pub fn preprocess(img: &DynamicImage, resolution: usize) -> Tensor<f32> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let r = resolution as u32;
    let rgb = if side == r {
        cropped.to_rgb8()
    } else {
        cropped.resize_exact(r, r, FilterType::Triangle).to_rgb8()
    };
    rgb_to_tensor(&rgb)
}

/// Decodes and preprocesses a single image file.
pub fn load_image(path: impl AsRef<Path>, resolution: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(preprocess(&img, resolution))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new([3, h, w], data).expect("consistent shape")
}

/// Quantizes a `C×H×W` tensor in `[−1, 1]` to an 8-bit RGB image (one channel
/// is replicated to gray).
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", t.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("cannot render {c} channels")));
    }
    let plane = h * w;
    let d = t.data();
    let q = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| q(d[if c == 1 { i } else { ch * plane + i }]);
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of a tensor's bit pattern, used as the id of generated images.
pub fn digest_tensor(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for &v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Loads every decodable image in `dir` (non-recursive), ordered by digest.
pub fn load_dataset(dir: impl AsRef<Path>, resolution: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let listing = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            files.push(entry.path());
        }
    }
    files.sort();
    let mut loaded: Vec<(String, String, Tensor<f32>)> = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        match image::load_from_memory(&bytes) {
            Ok(img) => loaded.push((digest_bytes(&bytes), name, preprocess(&img, resolution))),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedFile {
                    file: name,
                    reason: e.to_string(),
                });
            }
        }
    }
    if loaded.is_empty() {
        return Err(Error::Config(format!("no decodable images in {}", dir.display())));
    }
    loaded.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let manifest = DatasetManifest {
        resolution,
        preprocessing: preprocessing_recipe(resolution),
        entries: loaded
            .iter()
            .map(|(d, f, _)| ManifestEntry {
                file: f.clone(),
                digest: d.clone(),
                split: Split::Unused,
            })
            .collect(),
        skipped,
    };
    let images = loaded
        .into_iter()
        .map(|(id, _, tensor)| LabeledImage { id, tensor })
        .collect();
    Ok(Dataset { manifest, images })
}

/// Wraps in-memory images (e.g. synthetic ones) as a digest-ordered dataset.
pub fn dataset_from_tensors(images: Vec<Tensor<f32>>, preprocessing: impl Into<String>) -> Result<Dataset> {
    if images.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut labeled: Vec<LabeledImage> = images
        .into_iter()
        .map(|tensor| LabeledImage {
            id: digest_tensor(&tensor),
            tensor,
        })
        .collect();
    labeled.sort_by(|a, b| a.id.cmp(&b.id));
    let resolution = labeled[0].tensor.shape().last().copied().unwrap_or(0);
    Ok(Dataset {
        manifest: DatasetManifest {
            resolution,
            preprocessing: preprocessing.into(),
            entries: labeled
                .iter()
                .map(|i| ManifestEntry {
                    file: i.id.clone(),
                    digest: i.id.clone(),
                    split: Split::Unused,
                })
                .collect(),
            skipped: Vec::new(),
        },
        images: labeled,
    })
}

/// The first `shots` images (digest order) become shots, the next `tests`
/// images the test set. A digest present in both is an error.
pub fn split_dataset(ds: Dataset, shots: usize, tests: usize) -> Result<SplitDataset> {
    if shots + tests > ds.images.len() {
        return Err(Error::Config(format!(
            "need {shots} shots + {tests} test images, dataset has {}",
            ds.images.len()
        )));
    }
    let mut manifest = ds.manifest;
    let mut images = ds.images;
    images.truncate(shots + tests);
    let test_images = images.split_off(shots);
    let shot_digests: BTreeSet<&str> = images.iter().map(|i| i.id.as_str()).collect();
    if let Some(dup) = test_images.iter().find(|t| shot_digests.contains(t.id.as_str())) {
        return Err(Error::Config(format!(
            "image {} appears in both the shot and the test set",
            dup.id
        )));
    }
    for (i, e) in manifest.entries.iter_mut().enumerate() {
        e.split = if i < shots {
            Split::Shot
        } else if i < shots + tests {
            Split::Test
        } else {
            Split::Unused
        };
    }
    Ok(SplitDataset {
        manifest,
        shots: images,
        tests: test_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_unit_interval_bounds() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) });
        let t = rgb_to_tensor(&img);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn png_quantization_round_trips() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([(x * 80) as u8, (y * 200) as u8, 17]));
        assert_eq!(tensor_to_rgb(&rgb_to_tensor(&img)).unwrap(), img);
    }
}
