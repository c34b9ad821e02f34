//! On-disk dataset layout:
//!
//! ```text
//! <root>/meta.json        {"classes":["heart","la_enlargement"],"image_channels":1}
//! <root>/images/<id>.png  8-bit grayscale, or RGB when image_channels is 3
//! <root>/masks/<id>.png   8-bit single channel, pixel value = class label
//! ```

use std::fs;
use std::path::Path;

use image::{ColorType, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{resize_sample, Dataset, Sample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prototype::SegmentationMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: Vec<String>,
    pub image_channels: usize,
}

/// Intensity of an 8-bit level.
pub(crate) fn from_level(level: u8) -> f32 {
    level as f32 / 255.0
}

fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode(path: &Path, id: &str) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::data(id, format!("cannot decode {}: {other}", path.display())),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads an image as `[channels, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let id = stem(path);
    let img = decode(path, &id)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        n => return Err(Error::data(id, format!("unsupported channel count {n}"))),
    };
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        from_level(interleaved[p * channels + c])
    }))
}

/// Reads an indexed single-channel mask.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let id = stem(path);
    let img = decode(path, &id)?;
    if img.color() != ColorType::L8 {
        return Err(Error::data(
            id,
            format!("mask must be 8-bit single channel, got {:?}", img.color()),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    SegmentationMask::new(h, w, img.into_luma8().into_raw())
}

pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    let d = image.data();
    let plane = h * w;
    let buf: Vec<u8> = (0..plane * c).map(|i| to_level(d[(i % c) * plane + i / c])).collect();
    let result = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("sized buffer")
            .save_with_format(path, ImageFormat::Png),
        3 => RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("sized buffer")
            .save_with_format(path, ImageFormat::Png),
        n => return Err(Error::shape(format!("cannot write a {n}-channel image"))),
    };
    result.map_err(|e| image_error(path, e))
}

pub fn save_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .expect("sized buffer")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Tint applied to each foreground class in overlays: class 1 red, class 2 green.
pub const OVERLAY_COLORS: [[u8; 3]; 2] = [[255, 0, 0], [0, 255, 0]];

/// RGB rendering of `mask` over the first channel of `image`. Labelled pixels
/// are blended half and half with their class colour; other classes and
/// background keep the gray value.
pub fn overlay(image: &Tensor<f32>, mask: &SegmentationMask) -> Result<RgbImage> {
    let (_, h, w) = image.dims3()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "image is {h}x{w}, mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let gray = &image.data()[..h * w];
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let g = to_level(gray[p]);
        let rgb = match mask.labels()[p] {
            l @ 1..=2 => OVERLAY_COLORS[l as usize - 1].map(|c| ((g as u16 + c as u16) / 2) as u8),
            _ => [g; 3],
        };
        image::Rgb(rgb)
    }))
}

pub fn save_overlay(image: &Tensor<f32>, mask: &SegmentationMask, path: &Path) -> Result<()> {
    overlay(image, mask)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` in the directory layout above.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    let meta = DatasetMeta {
        classes: dataset.class_names().to_vec(),
        image_channels: dataset.image_channels(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string(&meta).expect("plain struct serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    for s in dataset.samples() {
        save_image(&s.image, &images.join(format!("{}.png", s.id)))?;
        save_mask(&s.mask, &masks.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Loads a dataset and brings every sample to 224 × 224.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset_resized(dir, IMAGE_SIZE)
}

/// Loads a dataset and brings every sample to `size × size`.
pub fn load_dataset_resized(dir: &Path, size: usize) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::data("<dataset>", format!("{} not found", meta_path.display())));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::data("<dataset>", format!("bad meta.json: {e}")))?;
    let images_dir = dir.join("images");
    let mut image_paths: Vec<_> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(Error::data(
            "<dataset>",
            format!("no images in {}", images_dir.display()),
        ));
    }
    let mut samples = Vec::with_capacity(image_paths.len());
    for path in image_paths {
        let id = stem(&path);
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::data(id, "missing mask"));
        }
        let image = load_image(&path, meta.image_channels)?;
        let mask = load_mask(&mask_path)?;
        if mask.max_label() as usize > meta.classes.len() {
            return Err(Error::data(
                id,
                format!(
                    "label {} exceeds the {} declared classes",
                    mask.max_label(),
                    meta.classes.len()
                ),
            ));
        }
        let (_, h, w) = image.dims3()?;
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::data(id, "image and mask sizes differ"));
        }
        let (image, mask) = resize_sample(&image, &mask, size)?;
        samples.push(Sample::new(id, image, mask)?);
    }
    Dataset::new(samples, meta.classes)
}
