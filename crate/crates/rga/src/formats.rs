//! File-backed versions of the core containers, plus PNG codecs.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rga_core::checkpoint::Checkpoint;
use rga_core::config::Config;
use rga_core::data::{Image, LabelMap};
use rga_core::prototypes::{decode_prototypes_container, encode_prototypes_container, PrototypeSet};

use crate::error::{Error, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::filled(h, w, 0.0);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let mut img = RgbImage::new(image.width() as u32, image.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = |c| (image.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb([v(0), v(1), v(2)]);
    }
    save(path, |p| img.save(p))
}

/// 8-bit label map; color inputs are reduced to their first channel.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw()).map_err(|e| Error::core(path, e))
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut img = GrayImage::new(labels.width() as u32, labels.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = Luma([labels.get(y as usize, x as usize)]);
    }
    save(path, |p| img.save(p))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    f(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::parse(&text).map_err(|e| Error::core(path, e))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?).map_err(|e| Error::core(path, e))
}

pub fn save_prototypes(path: &Path, set: &PrototypeSet) -> Result<()> {
    write_bytes(path, &encode_prototypes_container(set))
}

/// Loads a prototype container; `expected_dim` is the configured feature width.
pub fn load_prototypes(path: &Path, expected_dim: Option<usize>) -> Result<PrototypeSet> {
    decode_prototypes_container(&read_bytes(path)?, expected_dim).map_err(|e| Error::core(path, e))
}
