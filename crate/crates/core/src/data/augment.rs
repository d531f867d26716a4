use rand::Rng;

use super::{Image, LabelMap, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Per-channel dataset mean used as the erasing fill.
    pub fill: [f64; 3],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            pad: 10,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 1.0 / 0.3),
            fill: [0.5; 3],
        }
    }
}

/// The random decisions of one augmentation, separated from their application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPlan {
    pub flip: bool,
    /// Top-left corner of the crop inside the padded canvas.
    pub crop: (usize, usize),
    /// `(top, left, height, width)` of the erased rectangle.
    pub erase: Option<(usize, usize, usize, usize)>,
}

impl AugmentPlan {
    /// Flip off, centred crop, no erasing: the output equals a plain resize.
    pub fn identity(pad: usize) -> Self {
        Self {
            flip: false,
            crop: (pad, pad),
            erase: None,
        }
    }

    pub fn draw<R: Rng + ?Sized>(params: &AugmentParams, size: (usize, usize), rng: &mut R) -> Self {
        let (h, w) = size;
        let flip = rng.random_bool(params.flip_prob);
        let crop = (
            rng.random_range(0..=2 * params.pad),
            rng.random_range(0..=2 * params.pad),
        );
        let mut erase = None;
        if rng.random_bool(params.erase_prob) {
            let area = (h * w) as f64;
            for _ in 0..10 {
                let target = area * rng.random_range(params.erase_area.0..params.erase_area.1);
                let log_lo = libm::log(params.erase_aspect.0);
                let log_hi = libm::log(params.erase_aspect.1);
                let aspect = libm::exp(rng.random_range(log_lo..log_hi));
                let eh = libm::round(libm::sqrt(target * aspect)) as usize;
                let ew = libm::round(libm::sqrt(target / aspect)) as usize;
                if eh > 0 && ew > 0 && eh < h && ew < w {
                    let top = rng.random_range(0..=h - eh);
                    let left = rng.random_range(0..=w - ew);
                    erase = Some((top, left, eh, ew));
                    break;
                }
            }
        }
        Self { flip, crop, erase }
    }
}

fn transform_image(image: &Image, plan: &AugmentPlan, pad: usize, fill: [f64; 3]) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            // position in the padded canvas, then in the (flipped) source
            let py = y + plan.crop.0;
            let px = x + plan.crop.1;
            if py < pad || px < pad || py - pad >= h || px - pad >= w {
                continue;
            }
            let sy = py - pad;
            let sx = if plan.flip { w - 1 - (px - pad) } else { px - pad };
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    if let Some((top, left, eh, ew)) = plan.erase {
        for y in top..top + eh {
            for x in left..left + ew {
                for (c, &v) in fill.iter().enumerate() {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    out
}

fn transform_mask(mask: &LabelMap, plan: &AugmentPlan, pad: usize) -> LabelMap {
    let (h, w) = (mask.height(), mask.width());
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let py = y + plan.crop.0;
            let px = x + plan.crop.1;
            if py < pad || px < pad || py - pad >= h || px - pad >= w {
                continue;
            }
            let sx = if plan.flip { w - 1 - (px - pad) } else { px - pad };
            out.set(y, x, mask.get(py - pad, sx));
        }
    }
    out
}

/// Applies a fixed plan: resize, flip, pad-and-crop, erase. Masks follow the
/// geometric steps with nearest-neighbour resampling and ignore erasing.
pub fn apply_plan(
    sample: &Sample,
    train_size: (usize, usize),
    params: &AugmentParams,
    plan: &AugmentPlan,
) -> Result<Sample> {
    let (h, w) = train_size;
    if h < 2 || w < 2 {
        return Err(Error::Config(alloc::format!(
            "train size {h}x{w} is smaller than 2x2"
        )));
    }
    if sample.image.height() == 0 || sample.image.width() == 0 {
        return Err(Error::Dataset("cannot augment an empty image".into()));
    }
    if plan.crop.0 > 2 * params.pad || plan.crop.1 > 2 * params.pad {
        return Err(Error::Config("crop offset outside the padded canvas".into()));
    }
    let resized = sample.image.resize_bilinear(h, w);
    let image = transform_image(&resized, plan, params.pad, params.fill);
    let pseudo_mask = sample
        .pseudo_mask
        .as_ref()
        .map(|m| transform_mask(&m.resample_nearest(h, w), plan, params.pad));
    Ok(Sample {
        image,
        pseudo_mask,
        ..sample.clone()
    })
}

/// Draws a plan from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    train_size: (usize, usize),
    params: &AugmentParams,
    rng: &mut R,
) -> Result<Sample> {
    let plan = AugmentPlan::draw(params, train_size, rng);
    apply_plan(sample, train_size, params, &plan)
}
