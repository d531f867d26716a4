//! Properties that must survive positive rescaling, and parameters that
//! must survive training untouched.

use std::collections::BTreeMap;

use super::{entry, feature_map, prototype_set, rng, softmax, tiny_config, uniform};
use rand::Rng;
use rga_core::data::generate_synthetic;
use rga_core::encoder::FeatureMap;
use rga_core::matching::{rank_gallery, RetrievalIndex};
use rga_core::model::{Model, Stage};
use rga_core::params::Parameters;
use rga_core::prototypes::PrototypeSet;
use rga_core::ram::{invariance_scores, MemoryBank};
use rga_core::rgm::{compute_masks, RegionFeatures};
use rga_core::train::{train, train_prompt};

const TRIALS: u64 = 200;

fn ordering(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

pub fn beta_ignores_feature_and_center_scale() {
    for t in 0..TRIALS {
        let mut r = rng(8000 + t);
        let (n, d) = (r.random_range(1..7), r.random_range(2..10));
        let regions = uniform(n, d, &mut r);
        let centers = uniform(n, d, &mut r);
        let (a, c) = (r.random_range(0.01..100.0), r.random_range(0.01..100.0));
        let beta = invariance_scores(&RegionFeatures(regions.clone()), &MemoryBank::new(centers.clone(), 0.3, 0.85).unwrap()).unwrap();
        let scaled = invariance_scores(
            &RegionFeatures(regions.scale(a)),
            &MemoryBank::new(centers.scale(c), 0.3, 0.85).unwrap(),
        )
        .unwrap();
        for (x, y) in beta.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-6, "trial {t}");
        }
        assert_eq!(ordering(&beta), ordering(&scaled));
    }
}

pub fn masks_ignore_feature_and_prototype_scale() {
    for t in 0..TRIALS {
        let mut r = rng(9000 + t);
        let (h, w, d, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(2..8), r.random_range(1..5));
        let f = feature_map(h, w, d, &mut r);
        let protos = prototype_set(n, d, &mut r);
        let gamma = [1.0, 20.0, 100.0][t as usize % 3];
        let (a, c) = (r.random_range(0.01..100.0), r.random_range(0.01..100.0));
        let f2 = FeatureMap::new(h, w, f.values().scale(a)).unwrap();
        let bg: Vec<f64> = protos.background.iter().map(|v| v * c).collect();
        let p2 = PrototypeSet::new(protos.prototypes.scale(c), bg, protos.class_names.clone()).unwrap();
        let m1 = compute_masks(&f, &protos, gamma).unwrap();
        let m2 = compute_masks(&f2, &p2, gamma).unwrap();
        for (x, y) in m1.masks.as_slice().iter().zip(m2.masks.as_slice()) {
            assert!((x - y).abs() < 1e-6, "trial {t}");
        }
    }
}

/// Every vector of every entry gets its own positive factor; the ranked
/// gallery must come back in the same order.
pub fn rankings_ignore_feature_scale() {
    for t in 0..50 {
        let mut r = rng(10_000 + t);
        let (n, d) = (r.random_range(1..5), r.random_range(2..8));
        let make = |r: &mut rand_chacha::ChaCha8Rng, pid: u32, cam: u32| {
            let w = softmax(&(0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>());
            entry(uniform(1, d, r).into_vec(), uniform(n, d, r), w, pid, cam)
        };
        let query: Vec<_> = (0..4).map(|i| make(&mut r, i, 1)).collect();
        let gallery: Vec<_> = (0..12).map(|i| make(&mut r, i % 6, 2)).collect();
        let rescale = |e: &rga_core::matching::RetrievalEntry, r: &mut rand_chacha::ChaCha8Rng| {
            let mut e = e.clone();
            let a = r.random_range(0.01..100.0);
            e.global.iter_mut().for_each(|v| *v *= a);
            for j in 0..n {
                let c = r.random_range(0.01..100.0);
                let row: Vec<f64> = e.regions.row(j).iter().map(|v| v * c).collect();
                for (k, v) in row.into_iter().enumerate() {
                    e.regions.set(j, k, v);
                }
            }
            e
        };
        let g1 = RetrievalIndex::new(gallery.clone()).unwrap();
        let g2 = RetrievalIndex::new(gallery.iter().map(|e| rescale(e, &mut r)).collect()).unwrap();
        for q in &query {
            let q2 = rescale(q, &mut r);
            let a: Vec<usize> = rank_gallery(q, &g1).unwrap().into_iter().map(|(i, _)| i).collect();
            let b: Vec<usize> = rank_gallery(&q2, &g2).unwrap().into_iter().map(|(i, _)| i).collect();
            assert_eq!(a, b, "trial {t}");
        }
    }
}

fn snapshot(model: &Model) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |name, m| {
        out.insert(name.to_string(), m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect());
    });
    out
}

/// Names whose bytes differ between two snapshots.
fn changed(before: &BTreeMap<String, Vec<u8>>, after: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    before.iter().filter(|(k, v)| after.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect()
}

/// Two short training stages; whatever a stage may not update must come
/// out bit-for-bit the same, and the text encoder never moves.
pub fn frozen_parameters_survive_training() {
    let config = tiny_config(&[]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let mut model = Model::new(&config, splits.train.id_count(), None).unwrap();
    let text = model.prompt.text.fingerprint();
    let mut log = |_: &rga_core::train::LogRecord| {};

    let before = snapshot(&model);
    train_prompt(&mut model, &splits.train, &mut log).unwrap();
    let after = snapshot(&model);
    let prompt_trainable = model.trainable_names(Stage::Prompt);
    let moved = changed(&before, &after);
    assert!(!moved.is_empty(), "prompt stage changed nothing");
    for name in &moved {
        assert!(prompt_trainable.contains(name), "prompt stage changed `{name}`");
    }

    let before = after;
    train(&mut model, &splits.train, &mut log).unwrap();
    let after = snapshot(&model);
    let joint_trainable = model.trainable_names(Stage::Joint);
    let moved = changed(&before, &after);
    assert!(moved.iter().any(|n| n.starts_with("encoder.")), "joint stage left the encoder alone");
    for name in &moved {
        assert!(joint_trainable.contains(name), "joint stage changed `{name}`");
    }
    assert!(joint_trainable.iter().all(|n| !n.starts_with("prompt.context")));
    assert_eq!(model.prompt.text.fingerprint(), text);
}
