//! Machine-readable outputs: metrics, ranked lists, step logs, sweep tables.

use std::io::Write;

use rga_core::matching::{Metrics, QueryResult, RetrievalIndex};
use rga_core::train::LogRecord;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub excluded_queries: usize,
    pub evaluated_queries: usize,
}

impl From<&Metrics> for MetricsReport {
    fn from(m: &Metrics) -> Self {
        Self {
            rank1: m.rank(1),
            rank3: m.rank(3),
            rank5: m.rank(5),
            rank10: m.rank(10),
            map: m.map,
            excluded_queries: m.excluded_queries,
            evaluated_queries: m.evaluated_queries,
        }
    }
}

fn label(index: &RetrievalIndex, i: usize) -> String {
    let e = &index.entries()[i];
    e.source
        .clone()
        .unwrap_or_else(|| format!("#{i} (person {} camera {})", e.person_id, e.camera_id))
}

/// One JSON object per query: its path, then the top `k` gallery paths and
/// distances.
pub fn write_ranked<W: Write>(
    out: &mut W,
    query: &RetrievalIndex,
    gallery: &RetrievalIndex,
    results: &[QueryResult],
    k: usize,
) -> std::io::Result<()> {
    for r in results {
        let top: Vec<Value> = r
            .ranking
            .iter()
            .take(k)
            .map(|&(gi, d)| {
                json!({
                    "gallery": label(gallery, gi),
                    "person_id": gallery.entries()[gi].person_id,
                    "distance": d,
                })
            })
            .collect();
        let line = json!({
            "query": label(query, r.query),
            "person_id": query.entries()[r.query].person_id,
            "average_precision": r.average_precision,
            "top": top,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn log_line(rec: &LogRecord) -> String {
    let mut parts = Map::new();
    for (name, v) in &rec.parts {
        parts.insert(name.clone(), json!(v));
    }
    json!({
        "stage": rec.stage,
        "epoch": rec.epoch,
        "step": rec.step,
        "lr": rec.lr,
        "total": rec.total,
        "parts": parts,
        "admitted": rec.admitted,
    })
    .to_string()
}

/// A sweep row: the swept value and either a metrics report or the failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Tab-separated table with a header row.
pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{param}\trank1\trank5\tmAP\tstatus\n");
    for r in rows {
        match &r.metrics {
            Some(m) => s.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\tok\n",
                r.value, m.rank1, m.rank5, m.map
            )),
            None => s.push_str(&format!(
                "{}\t-\t-\t-\tfailed: {}\n",
                r.value,
                r.error.as_deref().unwrap_or("unknown error")
            )),
        }
    }
    s
}
