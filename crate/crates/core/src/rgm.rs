//! Region generation: cosine-similarity soft masks against the prototypes,
//! masked average pooling, and segmentation supervision.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::data::LabelMap;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;
use crate::tensor::Matrix;

/// Soft masks, one row per pixel and `N+1` columns (column 0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMasks {
    pub height: usize,
    pub width: usize,
    pub masks: Matrix,
    pub gamma: f64,
}

impl SegmentationMasks {
    pub fn classes(&self) -> usize {
        self.masks.cols() - 1
    }

    /// Mask value of channel `k` (0 = background) at `(y, x)`.
    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        self.masks.get(y * self.width + x, k)
    }

    /// Hard labels by per-pixel argmax; ties go to the lowest channel.
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.masks.rows())
            .map(|r| argmax_row(self.masks.row(r)) as u8)
            .collect();
        LabelMap::new(self.height, self.width, labels).expect("one label per pixel")
    }
}

pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Region features `F_j^r`, one row per class `j = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures(pub Matrix);

impl RegionFeatures {
    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    pub fn region(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }
}

/// Graph form of the mask softmax: `features` is `(B*P) x d`, `prototypes`
/// is `(N+1) x d` with the background first.
pub fn masks_on_graph(g: &mut Graph, features: Var, prototypes: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if g.value(features).cols() != g.value(prototypes).cols() {
        return Err(Error::Dimension {
            expected: g.value(prototypes).cols(),
            found: g.value(features).cols(),
        });
    }
    let fnorm = g.row_normalize(features, "pixel feature")?;
    let pnorm = g.row_normalize(prototypes, "prototype")?;
    let cos = g.matmul_nt(fnorm, pnorm)?;
    let logits = g.scale(cos, gamma);
    Ok(g.softmax_rows(logits))
}

/// `S_k(x,y) = exp(g cos(F(x,y), p_k)) / sum_m exp(g cos(F(x,y), p_m))`
/// over `k = 0..N` (background first).
pub fn compute_masks(features: &FeatureMap, prototypes: &PrototypeSet, gamma: f64) -> Result<SegmentationMasks> {
    let mut g = Graph::new();
    let f = g.constant(features.values().clone());
    let p = g.constant(prototypes.with_background());
    let s = masks_on_graph(&mut g, f, p, gamma)?;
    Ok(SegmentationMasks {
        height: features.height(),
        width: features.width(),
        masks: g.value(s).clone(),
        gamma,
    })
}

/// `F_j^r = sum S_j(x,y) F(x,y) / sum S_j(x,y)` for `j = 1..N`.
pub fn masked_average_pool(features: &FeatureMap, masks: &SegmentationMasks) -> Result<RegionFeatures> {
    let mut g = Graph::new();
    let s = g.constant(masks.masks.clone());
    let f = g.constant(features.values().clone());
    let block = features.height() * features.width();
    let r = g.masked_pool(s, f, block)?;
    Ok(RegionFeatures(g.value(r).clone()))
}

/// Checks a ground-truth label map against the mask shape.
fn targets_for(masks: &SegmentationMasks, gt: &LabelMap) -> Result<Vec<usize>> {
    let gt = gt.resample_nearest(masks.height, masks.width);
    let classes = masks.classes();
    if let Some(&bad) = gt.as_slice().iter().find(|&&l| l as usize > classes) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes,
        });
    }
    Ok(gt.to_targets())
}

/// Pixel-mean negative log-likelihood of the ground-truth channel, with
/// background pixels supervised against channel 0.
pub fn segmentation_loss(masks: &SegmentationMasks, gt: &LabelMap) -> Result<f64> {
    let targets = targets_for(masks, gt)?;
    let mut g = Graph::new();
    let s = g.constant(masks.masks.clone());
    let l = g.nll_rows(s, &targets)?;
    Ok(g.value(l).item())
}

/// Fixed horizontal stripes as hard masks: `(B*H*W) x (N+1)`, background
/// column all zero. Stripe `j` covers rows `j*H/N .. (j+1)*H/N`.
pub fn stripe_masks(height: usize, width: usize, stripes: usize, batch: usize) -> Result<Matrix> {
    if stripes == 0 || height < stripes {
        return Err(Error::Config(format!(
            "cannot cut {height} feature rows into {stripes} stripes"
        )));
    }
    let p = height * width;
    let mut m = Matrix::zeros(batch * p, stripes + 1);
    for b in 0..batch {
        for y in 0..height {
            let j = stripe_of_row(y, height, stripes);
            for x in 0..width {
                m.set(b * p + y * width + x, j + 1, 1.0);
            }
        }
    }
    Ok(m)
}

/// 0-based stripe index of feature row `y`.
pub fn stripe_of_row(y: usize, height: usize, stripes: usize) -> usize {
    (y * stripes / height).min(stripes - 1)
}

/// Fraction of pixels whose argmax mask equals the ground-truth label.
pub fn pixel_accuracy(masks: &SegmentationMasks, gt: &LabelMap) -> Result<f64> {
    let targets = targets_for(masks, gt)?;
    let pred = masks.argmax();
    let hits = pred
        .as_slice()
        .iter()
        .zip(&targets)
        .filter(|(p, t)| **p as usize == **t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}
