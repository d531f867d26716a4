//! Samples, splits, and the pure parts of the data pipeline.

mod augment;
mod sampler;
mod synthetic;

pub use augment::{apply_plan, augment, AugmentParams, AugmentPlan};
pub use sampler::PkSampler;
pub use synthetic::{band_rows, generate_synthetic, SyntheticConfig, SyntheticSplits};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An RGB image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape {
                op: "image",
                detail: alloc::format!("{} values for 3x{height}x{width}", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// `3 x (H*W)` view used by the encoder.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(Self::CHANNELS, self.height * self.width, self.data.clone())
            .expect("image buffer has 3*H*W values")
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            *o = plane.iter().sum::<f64>() / n;
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::filled(height, width, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |i: usize, scale: f64, limit: usize| -> (usize, usize, f64) {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(limit - 1);
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, src - lo as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, self.width);
                for c in 0..Self::CHANNELS {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }
}

/// Integer label map; 0 is background, `1..=N` are region classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape {
                op: "label_map",
                detail: alloc::format!("{} labels for {height}x{width}", labels.len()),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling; labels are never interpolated.
    pub fn resample_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = LabelMap::filled(height, width, 0);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    pub fn to_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub person_id: u32,
    pub camera_id: u32,
    pub pseudo_mask: Option<LabelMap>,
    /// Synthetic only; `occlusion_flags[j]` refers to region class `j + 1`.
    pub occlusion_flags: Option<Vec<bool>>,
    /// Source location, when loaded from disk.
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Query,
    Gallery,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Query => "query",
            SplitRole::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    samples: Vec<Sample>,
    role: SplitRole,
    /// Sorted distinct person ids; position is the classifier label.
    ids: Vec<u32>,
}

impl DatasetSplit {
    pub fn new(samples: Vec<Sample>, role: SplitRole) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset(alloc::format!("empty {} split", role.as_str())));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.image.is_valid() {
                return Err(Error::Dataset(alloc::format!(
                    "sample {i} has pixel values outside [0, 1]"
                )));
            }
        }
        let mut ids: Vec<u32> = samples.iter().map(|s| s.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(Self {
            samples,
            role,
            ids,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn id_count(&self) -> usize {
        self.ids.len()
    }

    pub fn person_ids(&self) -> &[u32] {
        &self.ids
    }

    /// Contiguous classifier label of a person id.
    pub fn label_of(&self, person_id: u32) -> Option<usize> {
        self.ids.binary_search(&person_id).ok()
    }

    /// Sample indices grouped by classifier label.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.person_id).or_default().push(i);
        }
        groups.into_values().collect()
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.pseudo_mask.is_some())
    }

    /// Per-channel mean over every pixel of the split.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for s in &self.samples {
            let m = s.image.channel_means();
            for c in 0..3 {
                acc[c] += m[c];
            }
        }
        acc.map(|v| v / self.samples.len() as f64)
    }
}
