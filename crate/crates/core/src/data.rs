//! Dataset ingestion, splitting, resizing and augmentation.
//!
//! On-disk layout is `root/images/<id>.<ext>` paired with
//! `root/masks/<id>.<ext>` (png or jpg). Images are scaled to `[0, 1]`;
//! mask pixels above 127 become foreground.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod synthetic;

pub use synthetic::generate_synthetic;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MASK_THRESHOLD: u8 = 127;
/// Largest per-pixel channel spread tolerated in a colour-encoded mask.
const MASK_CHANNEL_SPREAD: u8 = 32;

/// RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::CountMismatch {
                what: "image values",
                expected: 3 * height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = |c: usize| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([v(0), v(1), v(2)])
        })
    }

    fn to_rgb32f(&self) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb([0, 1, 2].map(|c| self.at(c, y as usize, x as usize)))
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (3, self.height, self.width),
            &Device::Cpu,
        )?)
    }
}

/// Binary mask `[H, W]` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::CountMismatch {
                what: "mask values",
                expected: height * width,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidValue("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().map(|v| *v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }

    fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| u8::from(p[0] > MASK_THRESHOLD)).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Option<Mask>) -> Result<Self> {
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::ShapeMismatch {
                    context: "image vs mask",
                    left: vec![image.height, image.width],
                    right: vec![m.height, m.width],
                });
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn require_mask(&self) -> Result<&Mask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::InvalidValue(format!("sample `{}` has no mask", self.id)))
    }
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Read an RGB image file scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}

/// Read a mask file and binarise it at 127.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    if img.color().channel_count() >= 3 {
        let rgb = img.to_rgb8();
        let colour = rgb.pixels().any(|p| {
            let (lo, hi) = (p.0.iter().min().unwrap(), p.0.iter().max().unwrap());
            hi - lo > MASK_CHANNEL_SPREAD
        });
        if colour {
            return Err(Error::file(path, "mask is not a single-channel (grayscale) image"));
        }
    }
    Ok(Mask::from_gray(&img.to_luma8()))
}

/// Load every image/mask pair under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = list_by_stem(&root.join("images"))?;
    let masks = list_by_stem(&root.join("masks"))?;
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::MissingMask { stem: stem.clone() })?;
        let image = read_image(image_path)?;
        let mask = read_mask(mask_path)?;
        let sample = Sample::new(stem.clone(), image, Some(mask))
            .map_err(|e| Error::file(mask_path, e))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as `root/images/<id>.png` and `root/masks/<id>.png`.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for s in samples {
        let path = images.join(format!("{}.png", s.id));
        s.image.to_rgb8().save(&path).map_err(|e| Error::file(&path, e))?;
        if let Some(m) = &s.mask {
            let path = masks.join(format!("{}.png", s.id));
            m.to_gray().save(&path).map_err(|e| Error::file(&path, e))?;
        }
    }
    Ok(())
}

/// Bilinear resize of the image and nearest-neighbour resize of the mask.
pub fn resize_sample(s: &Sample, side: usize) -> Result<Sample> {
    if side == 0 {
        return Err(Error::InvalidValue("resize side must be positive".into()));
    }
    if s.image.height == side && s.image.width == side {
        return Ok(s.clone());
    }
    let resized = image::imageops::resize(
        &s.image.to_rgb32f(),
        side as u32,
        side as u32,
        FilterType::Triangle,
    );
    let mut data = vec![0.0; 3 * side * side];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[(c * side + y as usize) * side + x as usize] = px[c].clamp(0.0, 1.0);
        }
    }
    let image = Image::new(side, side, data)?;
    let mask = s
        .mask
        .as_ref()
        .map(|m| {
            let gray = image::imageops::resize(
                &m.to_gray(),
                side as u32,
                side as u32,
                FilterType::Nearest,
            );
            Mask::from_gray(&gray)
        });
    Sample::new(s.id.clone(), image, mask)
}

/// Mirror left-right; image and mask move together.
pub fn flip_horizontal(s: &mut Sample) {
    let w = s.image.width;
    for row in s.image.data.chunks_mut(w) {
        row.reverse();
    }
    if let Some(m) = &mut s.mask {
        for row in m.data.chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Mirror top-bottom; image and mask move together.
pub fn flip_vertical(s: &mut Sample) {
    let (h, w) = (s.image.height, s.image.width);
    for c in 0..3 {
        for y in 0..h / 2 {
            for x in 0..w {
                s.image
                    .data
                    .swap((c * h + y) * w + x, (c * h + h - 1 - y) * w + x);
            }
        }
    }
    if let Some(m) = &mut s.mask {
        for y in 0..h / 2 {
            for x in 0..w {
                m.data.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
}

/// Random horizontal/vertical flips, each with probability 1/2.
pub fn augment<R: Rng + ?Sized>(s: &mut Sample, rng: &mut R) {
    if rng.random_bool(0.5) {
        flip_horizontal(s);
    }
    if rng.random_bool(0.5) {
        flip_vertical(s);
    }
}

/// Stack images into a `[B, 3, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let ts = images
        .into_iter()
        .map(Image::to_tensor)
        .collect::<Result<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(Error::InvalidValue("cannot stack an empty image list".into()));
    }
    Ok(Tensor::stack(&ts, 0)?)
}

/// Stack masks into a `[B, H, W]` f32 tensor.
pub fn stack_masks<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Tensor> {
    let ts = masks
        .into_iter()
        .map(|m| {
            let v: Vec<f32> = m.data.iter().map(|&b| b as f32).collect();
            Tensor::from_vec(v, (m.height, m.width), &Device::Cpu)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(Error::InvalidValue("cannot stack an empty mask list".into()));
    }
    Ok(Tensor::stack(&ts, 0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Seed of the train/val/test division.
    pub split_seed: u64,
    /// Seed of the labeled subset within the training partition.
    pub labeled_seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub labeled_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            split_seed: 0,
            labeled_seed: 0,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            labeled_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train_fraction, self.val_fraction, self.test_fraction];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("split fractions must lie in [0, 1]".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config("labeled fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Partition sizes `(labeled, unlabeled, val, test)` for `total` samples.
    pub fn sizes(&self, total: usize) -> (usize, usize, usize, usize) {
        let train = (total as f64 * self.train_fraction).round() as usize;
        let val = ((total as f64 * self.val_fraction).round() as usize).min(total - train);
        let test = total - train - val;
        let labeled = ((train as f64 * self.labeled_fraction).round() as usize).min(train);
        (labeled, train - labeled, val, test)
    }
}

/// Semi-supervised partitions. Unlabeled samples keep their masks in
/// storage; the training loop only ever reads their images.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train_labeled: Vec<Sample>,
    pub train_unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub spec: SplitSpec,
}

/// Ids per partition; enough to reproduce a split exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split_seed: u64,
    pub labeled_seed: u64,
    pub train_labeled: Vec<String>,
    pub train_unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sorted_by_id(mut v: Vec<Sample>) -> Vec<Sample> {
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Deterministic train/val/test division followed by a labeled/unlabeled
/// split of the training part.
pub fn make_splits(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut all = sorted_by_id(samples);
    if all.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidValue("sample ids must be unique".into()));
    }
    if let Some(s) = all.iter().find(|s| s.mask.is_none()) {
        return Err(Error::InvalidValue(format!("sample `{}` has no mask", s.id)));
    }
    let (labeled, unlabeled, val, _) = spec.sizes(all.len());
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.split_seed));
    let test: Vec<Sample> = all.split_off(labeled + unlabeled + val);
    let val_part: Vec<Sample> = all.split_off(labeled + unlabeled);
    let mut train = sorted_by_id(all);
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.labeled_seed));
    let unlabeled_part = train.split_off(labeled);

    let splits = Splits {
        train_labeled: sorted_by_id(train),
        train_unlabeled: sorted_by_id(unlabeled_part),
        val: sorted_by_id(val_part),
        test: sorted_by_id(test),
        spec: spec.clone(),
    };
    for (name, part) in [
        ("train_labeled", &splits.train_labeled),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if part.is_empty() {
            return Err(Error::EmptyPartition(name));
        }
    }
    if splits.train_unlabeled.is_empty() && spec.labeled_fraction < 1.0 {
        return Err(Error::EmptyPartition("train_unlabeled"));
    }
    Ok(splits)
}

impl Splits {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect();
        SplitManifest {
            split_seed: self.spec.split_seed,
            labeled_seed: self.spec.labeled_seed,
            train_labeled: ids(&self.train_labeled),
            train_unlabeled: ids(&self.train_unlabeled),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    /// Rebuild partitions from a manifest over a sample pool.
    pub fn from_manifest(samples: Vec<Sample>, manifest: &SplitManifest, spec: SplitSpec) -> Result<Self> {
        let mut by_id: BTreeMap<String, Sample> =
            samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::InvalidValue(format!("manifest id `{id}` not in dataset")))
                })
                .collect()
        };
        Ok(Self {
            train_labeled: take(&manifest.train_labeled)?,
            train_unlabeled: take(&manifest.train_unlabeled)?,
            val: take(&manifest.val)?,
            test: take(&manifest.test)?,
            spec,
        })
    }

    pub fn partition(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train_labeled" | "labeled" => Ok(&self.train_labeled),
            "train_unlabeled" | "unlabeled" => Ok(&self.train_unlabeled),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidValue(format!(
                "unknown split `{other}` (expected train_labeled, train_unlabeled, val or test)"
            ))),
        }
    }
}
