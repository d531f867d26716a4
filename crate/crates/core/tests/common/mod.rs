#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rga_core::encoder::FeatureMap;
use rga_core::matching::RetrievalEntry;
use rga_core::prototypes::PrototypeSet;
use rga_core::Matrix;

pub mod grad;
pub mod invariance;
pub mod metric;
pub mod oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn feature_map(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::new(h, w, uniform(h * w, d, rng)).unwrap()
}

pub fn prototype_set(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PrototypeSet {
    let background = uniform(1, d, rng).into_vec();
    let names = (1..=n).map(|j| format!("class{j}")).collect();
    PrototypeSet::new(uniform(n, d, rng), background, names).unwrap()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn entry(global: Vec<f64>, regions: Matrix, w: Vec<f64>, pid: u32, cam: u32) -> RetrievalEntry {
    RetrievalEntry {
        global,
        regions,
        w,
        person_id: pid,
        camera_id: cam,
        source: None,
    }
}

/// Largest elementwise relative error, with absolute slack near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A few identities at thumbnail size: trains in seconds.
pub fn tiny_config(extra: &[(&str, &str)]) -> rga_core::config::Config {
    let mut c = rga_core::config::Config::default();
    let base = [
        ("image_height", "32"),
        ("image_width", "16"),
        ("patch_size", "8"),
        ("feature_dim", "16"),
        ("token_dim", "8"),
        ("context_len", "4"),
        ("ids_per_batch", "4"),
        ("instances_per_id", "2"),
        ("epochs", "2"),
        ("prompt_epochs", "2"),
        ("lr", "3e-3"),
        ("prompt_lr", "3e-3"),
        ("lr_milestones", "1"),
        ("syn_id_count", "6"),
        ("syn_images_per_id", "8"),
        ("syn_query_per_id", "1"),
        ("syn_gallery_per_id", "2"),
        ("seed", "5"),
    ];
    for (k, v) in base.iter().chain(extra) {
        c.set(k, v).unwrap();
    }
    c
}
