//! Procedural occluded-pedestrian benchmark.
//!
//! Each identity owns one saturated colour per horizontal body band. A
//! rendering paints the bands inside a person-width column on a grey
//! background, optionally overwrites whole bands with a dark occluder, and
//! adds Gaussian noise. Query and gallery samples are later renderings of the
//! training identities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSplit, Image, LabelMap, Sample, SplitRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub id_count: usize,
    /// Renderings per identity across all three splits.
    pub images_per_id: usize,
    /// Taken from the end of each identity's renderings.
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub image_size: (usize, usize),
    /// Vertical layout, top to bottom; one entry per region class.
    pub band_fractions: Vec<f64>,
    pub occlusion_rate: f64,
    /// Per-channel interval the occluder colour is drawn from.
    pub occluder_color_range: (f64, f64),
    pub noise_std: f64,
    pub cameras: u32,
    /// When set, every occluder covers exactly this 1-based region class.
    pub force_occluded_band: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            id_count: 50,
            images_per_id: 20,
            query_per_id: 2,
            gallery_per_id: 6,
            image_size: (64, 32),
            band_fractions: vec![0.2, 0.35, 0.35, 0.1],
            occlusion_rate: 0.3,
            occluder_color_range: (0.0, 0.25),
            noise_std: 0.05,
            cameras: 6,
            force_occluded_band: None,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn regions(&self) -> usize {
        self.band_fractions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.id_count < 2 {
            return bad(format!(
                "synthetic id_count {} < 2 leaves retrieval undefined",
                self.id_count
            ));
        }
        if self.band_fractions.is_empty() || self.band_fractions.iter().any(|&f| !(f > 0.0)) {
            return bad("band fractions must be positive".into());
        }
        let total: f64 = self.band_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("band fractions sum to {total}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion rate {} outside [0, 1]", self.occlusion_rate));
        }
        let (lo, hi) = self.occluder_color_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("occluder colour range ({lo}, {hi}) invalid"));
        }
        if self.query_per_id == 0 || self.gallery_per_id == 0 {
            return bad("query_per_id and gallery_per_id must be positive".into());
        }
        if self.images_per_id <= self.query_per_id + self.gallery_per_id {
            return bad(format!(
                "images_per_id {} leaves no training renderings after {} query + {} gallery",
                self.images_per_id, self.query_per_id, self.gallery_per_id
            ));
        }
        if self.cameras == 0 || !(self.noise_std >= 0.0) {
            return bad("cameras must be positive and noise_std nonnegative".into());
        }
        if let Some(b) = self.force_occluded_band {
            if b == 0 || b > self.regions() {
                return bad(format!("forced occluded band {b} outside 1..={}", self.regions()));
            }
        }
        let (h, w) = self.image_size;
        if w < 8 {
            return bad(format!("image width {w} too small for a person column"));
        }
        band_rows(&self.band_fractions, h)?;
        Ok(())
    }
}

/// Row interval `[start, end)` of every band for an image of `height` rows.
pub fn band_rows(fractions: &[f64], height: usize) -> Result<Vec<(usize, usize)>> {
    let mut rows = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (j, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if j + 1 == fractions.len() {
            height
        } else {
            (libm::round(cum * height as f64) as usize).min(height)
        };
        if end <= start {
            return Err(Error::Config(format!(
                "band {} does not fit in an image of height {height}",
                j + 1
            )));
        }
        rows.push((start, end));
        start = end;
    }
    Ok(rows)
}

pub struct SyntheticSplits {
    pub train: DatasetSplit,
    pub query: DatasetSplit,
    pub gallery: DatasetSplit,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = libm::floor(h6) as i64 % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Renderer<'a> {
    config: &'a SyntheticConfig,
    bands: Vec<(usize, usize)>,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    fn render(&self, colors: &[[f64; 3]], rng: &mut ChaCha8Rng) -> (Image, LabelMap, Vec<bool>) {
        let (h, w) = self.config.image_size;
        let n = self.bands.len();
        let jitter = (w / 10) as i64;
        let shift = rng.random_range(-jitter..=jitter);
        let left = (w as i64 / 4 + shift).max(0) as usize;
        let right = ((3 * w) as i64 / 4 + shift).min(w as i64) as usize;
        let background = rng.random_range(0.3..0.6);
        let brightness = rng.random_range(0.9..1.1);

        let mut image = Image::filled(h, w, background);
        let mut mask = LabelMap::filled(h, w, 0);
        for (j, &(top, bottom)) in self.bands.iter().enumerate() {
            for y in top..bottom {
                for x in left..right {
                    for c in 0..3 {
                        image.set(c, y, x, (colors[j][c] * brightness).min(1.0));
                    }
                    mask.set(y, x, (j + 1) as u8);
                }
            }
        }

        let mut flags = vec![false; n];
        if rng.random_bool(self.config.occlusion_rate) {
            let (first, count) = match self.config.force_occluded_band {
                Some(b) => (b - 1, 1),
                None => {
                    let count = if n > 2 && rng.random_bool(0.3) { 2 } else { 1 };
                    let count = count.min(n.saturating_sub(1)).max(1);
                    (rng.random_range(0..=n - count), count)
                }
            };
            let (lo, hi) = self.config.occluder_color_range;
            let color: [f64; 3] = core::array::from_fn(|_| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            });
            let top = self.bands[first].0;
            let bottom = self.bands[first + count - 1].1;
            for y in top..bottom {
                for x in 0..w {
                    for (c, &v) in color.iter().enumerate() {
                        image.set(c, y, x, v);
                    }
                    mask.set(y, x, 0);
                }
            }
            for f in &mut flags[first..first + count] {
                *f = true;
            }
        }

        if self.config.noise_std > 0.0 {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let v = image.get(c, y, x) + self.noise.sample(rng);
                        image.set(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
        (image, mask, flags)
    }
}

/// Renders train, query, and gallery splits. Fully determined by `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticSplits> {
    config.validate()?;
    let renderer = Renderer {
        config,
        bands: band_rows(&config.band_fractions, config.image_size.0)?,
        noise: Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("noise: {e}")))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.regions();
    let query_start = config.images_per_id - config.query_per_id;
    let gallery_start = query_start - config.gallery_per_id;

    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    for pid in 0..config.id_count as u32 {
        let colors: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let h = rng.random_range(0.0..1.0);
                let s = rng.random_range(0.6..1.0);
                let v = rng.random_range(0.55..1.0);
                hsv_to_rgb(h, s, v)
            })
            .collect();
        for r in 0..config.images_per_id {
            let (image, mask, flags) = renderer.render(&colors, &mut rng);
            let sample = Sample {
                image,
                person_id: pid,
                camera_id: (r as u32 % config.cameras) + 1,
                pseudo_mask: Some(mask),
                occlusion_flags: Some(flags),
                source: Some(format!("synthetic/{pid:04}_c{}_r{r:02}", (r as u32 % config.cameras) + 1)),
            };
            if r >= query_start {
                query.push(sample);
            } else if r >= gallery_start {
                gallery.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(SyntheticSplits {
        train: DatasetSplit::new(train, SplitRole::Train)?,
        query: DatasetSplit::new(query, SplitRole::Query)?,
        gallery: DatasetSplit::new(gallery, SplitRole::Gallery)?,
    })
}
