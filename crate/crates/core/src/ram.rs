//! Region assessment: a shared discrimination head, invariance against a
//! momentum memory of class centers, score fusion, and the confidence
//! weighted identity loss.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{init_weight, Binder, Parameters};
use crate::rgm::{masked_average_pool, stripe_masks, RegionFeatures, SegmentationMasks};
use crate::tensor::{self, Matrix};

/// How the two indicators are fused before normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `softmax(alpha + beta)`
    #[default]
    Sum,
    /// `softmax((alpha + beta) / 2)`
    Mean,
}

impl Fusion {
    pub fn factor(self) -> f64 {
        match self {
            Fusion::Sum => 1.0,
            Fusion::Mean => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceScores {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
}

/// `alpha_j = sigmoid(W_a . F_j^r)` with one head shared by every region.
pub fn discrimination_scores(regions: &RegionFeatures, w_a: &[f64]) -> Result<Vec<f64>> {
    if regions.0.cols() != w_a.len() {
        return Err(Error::Dimension {
            expected: regions.0.cols(),
            found: w_a.len(),
        });
    }
    Ok((0..regions.classes())
        .map(|j| tensor::sigmoid(tensor::dot(regions.region(j), w_a)))
        .collect())
}

/// `beta = softmax_j cos(F_j^r, C_j)`.
pub fn invariance_scores(regions: &RegionFeatures, bank: &MemoryBank) -> Result<Vec<f64>> {
    if regions.classes() != bank.classes() || regions.0.cols() != bank.dim() {
        return Err(Error::Shape {
            op: "invariance_scores",
            detail: format!("regions {:?} vs centers {:?}", regions.0.shape(), bank.centers.shape()),
        });
    }
    let mut sims = Vec::with_capacity(regions.classes());
    for j in 0..regions.classes() {
        let s = tensor::cosine(regions.region(j), bank.centers.row(j)).ok_or(Error::DegenerateNorm {
            what: if tensor::norm(regions.region(j)) == 0.0 {
                "region feature"
            } else {
                "memory center"
            },
            index: j,
        })?;
        sims.push(s);
    }
    Ok(tensor::softmax(&sims))
}

/// `w = softmax(alpha + beta)`, or of their mean.
pub fn combine_scores(alpha: &[f64], beta: &[f64], fusion: Fusion) -> Result<Vec<f64>> {
    if alpha.len() != beta.len() || alpha.is_empty() {
        return Err(Error::Dimension {
            expected: alpha.len(),
            found: beta.len(),
        });
    }
    let k = fusion.factor();
    let logits: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| k * (a + b)).collect();
    Ok(tensor::softmax(&logits))
}

/// Class centers `C_1..C_N`, updated by momentum from admitted features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub centers: Matrix,
    pub momentum: f64,
    pub admit_threshold: f64,
}

impl MemoryBank {
    pub fn new(centers: Matrix, momentum: f64, admit_threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("memory momentum {momentum} outside [0, 1]")));
        }
        if !(admit_threshold > 0.0 && admit_threshold < 1.0) {
            return Err(Error::Config(format!(
                "admission threshold {admit_threshold} outside (0, 1)"
            )));
        }
        if centers.rows() == 0 || !centers.is_finite() {
            return Err(Error::Config("memory centers must be finite, N >= 1".into()));
        }
        Ok(Self {
            centers,
            momentum,
            admit_threshold,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// Stripe-pooled centers: `C_j` is the mean over `maps` of the average of
    /// stripe `j` of each map.
    pub fn from_stripes<'a>(
        maps: impl IntoIterator<Item = &'a FeatureMap>,
        stripes: usize,
        momentum: f64,
        admit_threshold: f64,
    ) -> Result<Self> {
        let mut acc: Option<Matrix> = None;
        let mut count = 0usize;
        for f in maps {
            let masks = SegmentationMasks {
                height: f.height(),
                width: f.width(),
                masks: stripe_masks(f.height(), f.width(), stripes, 1)?,
                gamma: 1.0,
            };
            let r = masked_average_pool(f, &masks)?.0;
            match &mut acc {
                Some(a) => {
                    if a.shape() != r.shape() {
                        return Err(Error::Dimension {
                            expected: a.cols(),
                            found: r.cols(),
                        });
                    }
                    a.add_assign(&r)
                }
                None => acc = Some(r),
            }
            count += 1;
        }
        let acc = acc.ok_or_else(|| Error::Dataset("memory init needs at least one image".into()))?;
        Self::new(acc.scale(1.0 / count as f64), momentum, admit_threshold)
    }

    /// One momentum step. `candidates[j]` holds the batch's class-`j` region
    /// features (one per row) and `alphas[j]` their discrimination scores;
    /// only rows with `alpha > tau` are admitted. Returns admitted counts.
    pub fn update(&mut self, candidates: &[Matrix], alphas: &[Vec<f64>]) -> Result<Vec<usize>> {
        if candidates.len() != self.classes() || alphas.len() != self.classes() {
            return Err(Error::Dimension {
                expected: self.classes(),
                found: candidates.len().min(alphas.len()),
            });
        }
        let mut admitted = Vec::with_capacity(self.classes());
        for (j, (feats, alpha)) in candidates.iter().zip(alphas).enumerate() {
            if feats.rows() != alpha.len() || (feats.rows() > 0 && feats.cols() != self.dim()) {
                return Err(Error::Shape {
                    op: "update_memory",
                    detail: format!("class {j}: {:?} features, {} alphas", feats.shape(), alpha.len()),
                });
            }
            let mut mean = alloc::vec![0.0; self.dim()];
            let mut n = 0usize;
            for (r, &a) in alpha.iter().enumerate() {
                if a > self.admit_threshold {
                    for (m, v) in mean.iter_mut().zip(feats.row(r)) {
                        *m += v;
                    }
                    n += 1;
                }
            }
            if n > 0 {
                let m_u = self.momentum;
                for (c, v) in self.centers.row_mut(j).iter_mut().zip(&mean) {
                    *c = m_u * *c + (1.0 - m_u) * (v / n as f64);
                }
            }
            admitted.push(n);
        }
        Ok(admitted)
    }
}

/// Shared scoring head `W_a` (`d x 1`) and per-region identity classifiers
/// `W_b[j]` (`d x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct RamHeads {
    pub w_a: Matrix,
    pub w_b: Vec<Matrix>,
}

impl RamHeads {
    pub fn new(regions: usize, dim: usize, identities: usize, seed: u64) -> Result<Self> {
        if dim == 0 || identities == 0 {
            return Err(Error::Config("heads need positive width and identity count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w_a: init_weight(dim, 1, &mut rng),
            w_b: (0..regions).map(|_| init_weight(dim, identities, &mut rng)).collect(),
        })
    }

    pub fn identities(&self) -> usize {
        self.w_b.first().map_or(0, Matrix::cols)
    }

    pub fn bind(&self, binder: &mut Binder<'_>, trainable: bool) -> RamVars {
        let w_a = binder.bind("ram.w_a", &self.w_a, trainable);
        let w_b = self
            .w_b
            .iter()
            .enumerate()
            .map(|(j, m)| binder.bind(&format!("ram.w_b{j}"), m, trainable))
            .collect();
        RamVars { w_a, w_b }
    }
}

impl Parameters for RamHeads {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("ram.w_a", &self.w_a);
        for (j, m) in self.w_b.iter().enumerate() {
            f(&format!("ram.w_b{j}"), m);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("ram.w_a", &mut self.w_a);
        for (j, m) in self.w_b.iter_mut().enumerate() {
            f(&format!("ram.w_b{j}"), m);
        }
    }
}

pub struct RamVars {
    pub w_a: Var,
    pub w_b: Vec<Var>,
}

/// Region-major `(N*B) x 1` alpha node for region-major `(N*B) x d` features.
pub fn alpha_on_graph(g: &mut Graph, regions: Var, w_a: Var) -> Result<Var> {
    let logit = g.matmul(regions, w_a)?;
    Ok(g.sigmoid(logit))
}

/// Confidence weights on the graph: `alpha` is region-major `(N*B) x 1`,
/// `beta` is a `B x N` constant. Returns the region-major `(N*B) x 1` `w`.
pub fn fuse_on_graph(g: &mut Graph, alpha: Var, beta: &Matrix, fusion: Fusion) -> Result<Var> {
    let (batch, regions) = beta.shape();
    let a = g.reshape(alpha, regions, batch)?;
    let a = g.transpose(a);
    let b = g.constant(beta.clone());
    let logits = g.add(a, b)?;
    let logits = g.scale(logits, fusion.factor());
    let w = g.softmax_rows(logits);
    let w = g.transpose(w);
    g.reshape(w, regions * batch, 1)
}

/// `(1/B) sum_b sum_j w_bj CE(W_b[j] F_j^r, y_b)` on region-major inputs.
pub fn ram_loss_on_graph(
    g: &mut Graph,
    regions: Var,
    w: Var,
    w_b: &[Var],
    targets: &[usize],
) -> Result<Var> {
    let batch = targets.len();
    if g.value(regions).rows() != w_b.len() * batch || g.value(w).rows() != w_b.len() * batch {
        return Err(Error::Shape {
            op: "ram_loss",
            detail: format!(
                "{} region rows, {} weights for N = {} and B = {batch}",
                g.value(regions).rows(),
                g.value(w).rows(),
                w_b.len()
            ),
        });
    }
    let mut parts = Vec::with_capacity(w_b.len());
    for (j, &head) in w_b.iter().enumerate() {
        let fj = g.slice_rows(regions, j * batch, (j + 1) * batch)?;
        let wj = g.slice_rows(w, j * batch, (j + 1) * batch)?;
        let logits = g.matmul(fj, head)?;
        parts.push(g.cross_entropy(logits, targets, Some(wj))?);
    }
    g.sum(&parts)
}

/// `sum_j w_j CE_j` for one image with `w` held constant.
pub fn ram_loss(regions: &RegionFeatures, w: &[f64], heads: &RamHeads, target: usize) -> Result<f64> {
    let n = regions.classes();
    if w.len() != n || heads.w_b.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: w.len(),
        });
    }
    let mut g = Graph::new();
    let r = g.constant(regions.0.clone());
    let wv = g.constant(Matrix::from_vec(n, 1, w.to_vec())?);
    let heads: Vec<Var> = heads.w_b.iter().map(|m| g.constant(m.clone())).collect();
    let l = ram_loss_on_graph(&mut g, r, wv, &heads, &[target])?;
    Ok(g.value(l).item())
}

/// Full assessment of one image's regions.
pub fn assess(
    regions: &RegionFeatures,
    heads: &RamHeads,
    bank: &MemoryBank,
    fusion: Fusion,
) -> Result<ConfidenceScores> {
    let alpha = discrimination_scores(regions, heads.w_a.as_slice())?;
    let beta = invariance_scores(regions, bank)?;
    let w = combine_scores(&alpha, &beta, fusion)?;
    Ok(ConfidenceScores { alpha, beta, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_head_gives_half() {
        let r = RegionFeatures(Matrix::from_vec(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap());
        assert_eq!(discrimination_scores(&r, &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let one = RegionFeatures(Matrix::row_vector(vec![1.0, 0.0]));
        let a = discrimination_scores(&one, &[1.0, 7.0]).unwrap()[0];
        assert!((a - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn momentum_limits_and_numeric_case() {
        let c = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();

        let mut frozen = MemoryBank::new(c.clone(), 1.0, 0.85).unwrap();
        frozen.update(std::slice::from_ref(&v), &[vec![0.99]]).unwrap();
        assert_eq!(frozen.centers, c);

        let mut replace = MemoryBank::new(c.clone(), 0.0, 0.85).unwrap();
        replace.update(std::slice::from_ref(&v), &[vec![0.99]]).unwrap();
        assert_eq!(replace.centers, v);

        let mut bank = MemoryBank::new(c.clone(), 0.3, 0.85).unwrap();
        assert_eq!(bank.update(std::slice::from_ref(&v), &[vec![0.9]]).unwrap(), vec![1]);
        assert!((bank.centers.get(0, 0) - 0.3).abs() < 1e-12);
        assert!((bank.centers.get(0, 1) - 0.7).abs() < 1e-12);

        let mut rejected = MemoryBank::new(c.clone(), 0.3, 0.85).unwrap();
        assert_eq!(rejected.update(&[v], &[vec![0.85]]).unwrap(), vec![0]);
        assert_eq!(rejected.centers, c);
    }

    #[test]
    fn bank_rejects_bad_hyperparameters() {
        let c = Matrix::filled(2, 2, 1.0);
        assert!(MemoryBank::new(c.clone(), 1.5, 0.85).is_err());
        assert!(MemoryBank::new(c.clone(), 0.3, 1.0).is_err());
        assert!(MemoryBank::new(c, 0.3, 0.0).is_err());
    }

    #[test]
    fn beta_closed_forms() {
        let bank = MemoryBank::new(
            Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap(),
            0.3,
            0.85,
        )
        .unwrap();
        // cosines (1, 0, 0, 0)
        let r = RegionFeatures(Matrix::from_vec(4, 2, vec![2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 1.0, 0.0]).unwrap());
        let beta = invariance_scores(&r, &bank).unwrap();
        let e = libm::exp(1.0);
        assert!((beta[0] - e / (e + 3.0)).abs() < 1e-12);
        assert!((beta[0] - 0.4754).abs() < 1e-4 && (beta[1] - 0.1749).abs() < 1e-4);

        let zero = RegionFeatures(Matrix::zeros(4, 2));
        assert!(matches!(invariance_scores(&zero, &bank), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn fusion_closed_form() {
        let w = combine_scores(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4], Fusion::Sum).unwrap();
        assert!((w[0] - 0.4754).abs() < 1e-4);
        let u = combine_scores(&[0.3; 4], &[0.25; 4], Fusion::Mean).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_weight_region_contributes_nothing() {
        let heads = RamHeads::new(2, 2, 3, 1).unwrap();
        let r = RegionFeatures(Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let full = ram_loss(&r, &[1.0, 0.0], &heads, 1).unwrap();
        let only = {
            let r0 = RegionFeatures(Matrix::row_vector(vec![1.0, 2.0]));
            let h0 = RamHeads {
                w_a: heads.w_a.clone(),
                w_b: vec![heads.w_b[0].clone()],
            };
            ram_loss(&r0, &[1.0], &h0, 1).unwrap()
        };
        assert!((full - only).abs() < 1e-12);
    }
}
