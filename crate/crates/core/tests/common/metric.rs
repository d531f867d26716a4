//! Ranking metrics against exhaustive enumeration.

use super::{entry, softmax};
use rga_core::matching::{aggregate_distance, evaluate, evaluate_detailed, RetrievalEntry, RetrievalIndex};
use rga_core::Matrix;

/// Angles on the unit circle make the distances easy to reason about.
fn at(angle_deg: f64, pid: u32, cam: u32) -> RetrievalEntry {
    let a = angle_deg.to_radians();
    let regions = Matrix::from_vec(2, 2, vec![a.cos(), a.sin(), -a.sin(), a.cos()]).unwrap();
    entry(vec![a.cos(), a.sin()], regions, softmax(&[0.1 * angle_deg.to_radians(), 0.0]), pid, cam)
}

fn fixture() -> (RetrievalIndex, RetrievalIndex) {
    let query = vec![
        at(0.0, 1, 1),
        at(90.0, 2, 1),
        at(180.0, 3, 2),
        at(45.0, 4, 1),
        at(270.0, 5, 1), // only same-camera matches: excluded
    ];
    let gallery = vec![
        at(10.0, 1, 2),
        at(100.0, 1, 3),
        at(80.0, 2, 2),
        at(200.0, 2, 3),
        at(170.0, 3, 1),
        at(190.0, 3, 2), // same person and camera as query 3
        at(60.0, 4, 2),
        at(30.0, 4, 3),
        at(275.0, 5, 1),
        at(300.0, 6, 2),
    ];
    (RetrievalIndex::new(query).unwrap(), RetrievalIndex::new(gallery).unwrap())
}

/// Average precision by exhaustive enumeration of every relevant position.
fn brute_ap(q: &RetrievalEntry, gallery: &RetrievalIndex) -> Option<(f64, usize)> {
    let mut items: Vec<(f64, usize)> = gallery
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.person_id == q.person_id && g.camera_id == q.camera_id))
        .map(|(i, g)| (aggregate_distance(q, g).unwrap(), i))
        .collect();
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let rel: Vec<bool> = items.iter().map(|&(_, i)| gallery.entries()[i].person_id == q.person_id).collect();
    let positions: Vec<usize> = (0..rel.len()).filter(|&k| rel[k]).collect();
    if positions.is_empty() {
        return None;
    }
    let mut ap = 0.0;
    for &k in &positions {
        let hits_so_far = rel[..=k].iter().filter(|&&r| r).count();
        ap += hits_so_far as f64 / (k + 1) as f64;
    }
    Some((ap / positions.len() as f64, positions[0]))
}

pub fn five_by_ten_fixture_matches_brute_force() {
    let (query, gallery) = fixture();
    let (metrics, results) = evaluate_detailed(&query, &gallery).unwrap();

    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for (q, res) in query.entries().iter().zip(&results) {
        let brute = brute_ap(q, &gallery);
        match (brute, res.average_precision) {
            (Some((ap, first)), Some(got)) => {
                assert!((ap - got).abs() < 1e-9);
                aps.push(ap);
                firsts.push(first);
            }
            (None, None) => {}
            other => panic!("disagreement on query {}: {other:?}", res.query),
        }
    }
    assert_eq!(metrics.evaluated_queries, 4);
    assert_eq!(metrics.excluded_queries, 1);
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    assert!((metrics.map - map).abs() < 1e-9);
    for k in 1..=gallery.len() {
        let cmc = firsts.iter().filter(|&&f| f < k).count() as f64 / firsts.len() as f64;
        assert!((metrics.rank(k) - cmc).abs() < 1e-9, "rank {k}");
    }
    for pair in metrics.cmc.windows(2) {
        assert!(pair[0] <= pair[1]);
    }
    assert_eq!(metrics.rank(1000), metrics.rank(gallery.len()));
}

pub fn self_retrieval_is_perfect() {
    let gallery: Vec<_> = (0..6).map(|i| at(60.0 * i as f64, i, 2)).collect();
    let query: Vec<_> = (0..6).map(|i| at(60.0 * i as f64, i, 1)).collect();
    let m = evaluate(&RetrievalIndex::new(query).unwrap(), &RetrievalIndex::new(gallery).unwrap()).unwrap();
    assert_eq!(m.rank(1), 1.0);
    assert_eq!(m.map, 1.0);
}
