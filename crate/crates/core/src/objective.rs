//! Identity, triplet, and combined training objectives.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ram::ram_loss_on_graph;
use crate::tensor::Matrix;

/// Scalar total plus its named parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub parts: Vec<(String, f64)>,
}

impl LossReport {
    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// `-log softmax(F_g W)[target]` for a single global feature.
pub fn id_loss(global: &[f64], classifier: &Matrix, target: usize) -> Result<f64> {
    if classifier.rows() != global.len() {
        return Err(Error::Dimension {
            expected: classifier.rows(),
            found: global.len(),
        });
    }
    let mut g = Graph::new();
    let f = g.constant(Matrix::row_vector(global.to_vec()));
    let w = g.constant(classifier.clone());
    let logits = g.matmul(f, w)?;
    let l = g.cross_entropy(logits, &[target], None)?;
    Ok(g.value(l).item())
}

/// Batch-hard triplet loss over the rows of `features`.
pub fn triplet_loss(features: &Matrix, labels: &[usize], margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let l = g.batch_hard_triplet(x, labels, margin)?;
    Ok(g.value(l).item())
}

/// Graph nodes feeding the combined objective. Region nodes are region-major
/// `(N*B) x d`; `regions` is `None` for a configuration without region paths.
pub struct ObjectiveInputs<'a> {
    pub regions: Option<Var>,
    pub w: Option<Var>,
    pub w_b: &'a [Var],
    pub global: Var,
    pub classifier: Var,
    pub targets: &'a [usize],
    pub margin: f64,
}

/// Builds `L_ram + sum_j L_tri(F_j^r) + L_id(F_g) + L_tri(F_g)`; returns the
/// total node and the named part nodes.
pub fn total_loss_on_graph(g: &mut Graph, inp: &ObjectiveInputs<'_>) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let batch = inp.targets.len();
    let mut parts = Vec::with_capacity(4);
    if let Some(regions) = inp.regions {
        let w = inp
            .w
            .ok_or_else(|| Error::Missing("confidence weights for the region loss".into()))?;
        parts.push(("ram", ram_loss_on_graph(g, regions, w, inp.w_b, inp.targets)?));
        let mut tri = Vec::with_capacity(inp.w_b.len());
        for j in 0..inp.w_b.len() {
            let fj = g.slice_rows(regions, j * batch, (j + 1) * batch)?;
            tri.push(g.batch_hard_triplet(fj, inp.targets, inp.margin)?);
        }
        parts.push(("tri_regions", g.sum(&tri)?));
    }
    let logits = g.matmul(inp.global, inp.classifier)?;
    parts.push(("id_global", g.cross_entropy(logits, inp.targets, None)?));
    parts.push(("tri_global", g.batch_hard_triplet(inp.global, inp.targets, inp.margin)?));
    let nodes: Vec<Var> = parts.iter().map(|(_, v)| *v).collect();
    let total = g.sum(&nodes)?;
    Ok((total, parts))
}

/// Reads back a report from evaluated nodes.
pub fn report(g: &Graph, total: Var, parts: &[(&'static str, Var)]) -> LossReport {
    LossReport {
        total: g.value(total).item(),
        parts: parts
            .iter()
            .map(|(n, v)| (String::from(*n), g.value(*v).item()))
            .collect(),
    }
}

/// Value-level combined loss for a batch.
///
/// `regions` is region-major `(N*B) x d` and `w` region-major `N*B`
/// weights; pass `None` for both to drop the region terms.
pub fn total_loss(
    regions: Option<(&Matrix, &[f64])>,
    w_b: &[Matrix],
    globals: &Matrix,
    classifier: &Matrix,
    targets: &[usize],
    margin: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let (r, w) = match regions {
        Some((r, w)) => {
            let rv = g.constant(r.clone());
            let wv = g.constant(Matrix::from_vec(w.len(), 1, w.to_vec())?);
            (Some(rv), Some(wv))
        }
        None => (None, None),
    };
    let heads: Vec<Var> = if r.is_some() {
        w_b.iter().map(|m| g.constant(m.clone())).collect()
    } else {
        Vec::new()
    };
    let global = g.constant(globals.clone());
    let classifier = g.constant(classifier.clone());
    let inp = ObjectiveInputs {
        regions: r,
        w,
        w_b: &heads,
        global,
        classifier,
        targets,
        margin,
    };
    let (total, parts) = total_loss_on_graph(&mut g, &inp)?;
    Ok(report(&g, total, &parts))
}
