//! Confidence-weighted distances and single-query CMC / mAP evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Everything retrieval needs about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEntry {
    pub global: Vec<f64>,
    /// `N x d` region features.
    pub regions: Matrix,
    pub w: Vec<f64>,
    pub person_id: u32,
    pub camera_id: u32,
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalIndex {
    entries: Vec<RetrievalEntry>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<RetrievalEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dataset("cannot index an empty split".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[RetrievalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    tensor::cosine(a, b)
        .map(|c| 1.0 - c)
        .ok_or(Error::DegenerateNorm {
            what: "retrieval feature",
            index: usize::from(tensor::norm(a) != 0.0),
        })
}

/// `(sum_j w^q_j w^g_j d_j + d_g) / (sum_j w^q_j w^g_j + 1)`.
pub fn aggregate_distance(q: &RetrievalEntry, g: &RetrievalEntry) -> Result<f64> {
    if q.regions.shape() != g.regions.shape() || q.w.len() != g.w.len() || q.w.len() != q.regions.rows() {
        return Err(Error::Shape {
            op: "aggregate_distance",
            detail: format!("query {:?} vs gallery {:?}", q.regions.shape(), g.regions.shape()),
        });
    }
    let mut num = cosine_distance(&q.global, &g.global)?;
    let mut den = 1.0;
    for j in 0..q.w.len() {
        let weight = q.w[j] * g.w[j];
        if weight != 0.0 {
            num += weight * cosine_distance(q.regions.row(j), g.regions.row(j))?;
        }
        den += weight;
    }
    Ok(num / den)
}

/// Gallery positions sorted by ascending distance, ties by gallery order.
pub fn rank_gallery(q: &RetrievalEntry, gallery: &RetrievalIndex) -> Result<Vec<(usize, f64)>> {
    let mut ranked = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(i, g)| aggregate_distance(q, g).map(|d| (i, d)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `cmc[k-1]` = fraction of evaluated queries with a match in the top k.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
}

impl Metrics {
    /// CMC@k; ranks past the gallery length saturate.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Per-query result kept for ranked-list dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    /// Valid (unfiltered) gallery positions with distances, best first.
    pub ranking: Vec<(usize, f64)>,
    pub average_precision: Option<f64>,
}

/// Average precision of a 0/1 relevance list in rank order; `None` when no
/// item is relevant.
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in relevant.into_iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Single-query protocol: gallery items sharing both person and camera with
/// the query are dropped; queries left without a correct match are counted
/// in `excluded_queries` and skipped.
pub fn evaluate_detailed(query: &RetrievalIndex, gallery: &RetrievalIndex) -> Result<(Metrics, Vec<QueryResult>)> {
    let mut cmc = alloc::vec![0.0; gallery.len()];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    let mut results = Vec::with_capacity(query.len());
    for (qi, q) in query.entries.iter().enumerate() {
        let ranking: Vec<(usize, f64)> = rank_gallery(q, gallery)?
            .into_iter()
            .filter(|&(gi, _)| {
                let g = &gallery.entries[gi];
                !(g.person_id == q.person_id && g.camera_id == q.camera_id)
            })
            .collect();
        let relevant: Vec<bool> = ranking
            .iter()
            .map(|&(gi, _)| gallery.entries[gi].person_id == q.person_id)
            .collect();
        let ap = average_precision(relevant.iter().copied());
        match (ap, relevant.iter().position(|&r| r)) {
            (Some(ap), Some(first)) => {
                evaluated += 1;
                ap_sum += ap;
                for c in &mut cmc[first..] {
                    *c += 1.0;
                }
            }
            _ => excluded += 1,
        }
        results.push(QueryResult {
            query: qi,
            ranking,
            average_precision: ap,
        });
    }
    if evaluated > 0 {
        for c in &mut cmc {
            *c /= evaluated as f64;
        }
    }
    let metrics = Metrics {
        cmc,
        map: if evaluated > 0 { ap_sum / evaluated as f64 } else { 0.0 },
        evaluated_queries: evaluated,
        excluded_queries: excluded,
    };
    Ok((metrics, results))
}

pub fn evaluate(query: &RetrievalIndex, gallery: &RetrievalIndex) -> Result<Metrics> {
    evaluate_detailed(query, gallery).map(|(m, _)| m)
}
