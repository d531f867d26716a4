//! Library results against direct re-evaluations of the defining formulas.

use super::{cos, entry, feature_map, prototype_set, rng, softmax, uniform};
use rand::Rng;
use rga_core::matching::{aggregate_distance, cosine_distance};
use rga_core::ram::{combine_scores, discrimination_scores, invariance_scores, Fusion, MemoryBank};
use rga_core::rgm::{compute_masks, masked_average_pool, RegionFeatures};
use rga_core::Matrix;

const TRIALS: u64 = 100;

/// Worst deviation of a mask column sum from one over `draws` random
/// feature maps and prototype sets at each of the given sharpness values.
pub fn mask_simplex(draws: u64, gammas: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..draws {
        let mut r = rng(7000 + t);
        let (h, w, d, n) = (r.random_range(1..7), r.random_range(1..7), r.random_range(2..12), r.random_range(1..8));
        let f = feature_map(h, w, d, &mut r);
        let protos = prototype_set(n, d, &mut r);
        let gamma = gammas[t as usize % gammas.len()];
        let masks = compute_masks(&f, &protos, gamma).unwrap();
        for p in 0..h * w {
            let s: f64 = (0..=n).map(|k| masks.masks.get(p, k)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}


pub fn masks_and_pooling_match_direct_sums() {
    for t in 0..TRIALS {
        let mut r = rng(1000 + t);
        let (h, w, d, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(2..7), r.random_range(1..5));
        let f = feature_map(h, w, d, &mut r);
        let protos = prototype_set(n, d, &mut r);
        let gamma = r.random_range(0.5..30.0);
        let masks = compute_masks(&f, &protos, gamma).unwrap();
        let all = protos.with_background();

        let mut s = vec![vec![0.0; n + 1]; h * w];
        for p in 0..h * w {
            let logits: Vec<f64> = (0..=n).map(|k| gamma * cos(f.values().row(p), all.row(k))).collect();
            s[p] = softmax(&logits);
            for k in 0..=n {
                assert!((masks.masks.get(p, k) - s[p][k]).abs() < 1e-6);
            }
        }

        let pooled = masked_average_pool(&f, &masks).unwrap();
        for j in 1..=n {
            let z: f64 = (0..h * w).map(|p| s[p][j]).sum();
            for c in 0..d {
                let v: f64 = (0..h * w).map(|p| s[p][j] * f.values().get(p, c)).sum::<f64>() / z;
                assert!((pooled.region(j - 1)[c] - v).abs() < 1e-6, "trial {t} class {j}");
            }
        }
    }
}

pub fn momentum_update_matches_direct_formula() {
    for t in 0..TRIALS {
        let mut r = rng(2000 + t);
        let (n, d, b) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..7));
        let m_u = r.random_range(0.0..=1.0);
        let tau = 0.85;
        let centers = uniform(n, d, &mut r);
        let mut bank = MemoryBank::new(centers.clone(), m_u, tau).unwrap();
        let feats: Vec<Matrix> = (0..n).map(|_| uniform(b, d, &mut r)).collect();
        let alphas: Vec<Vec<f64>> = (0..n).map(|_| (0..b).map(|_| r.random_range(0.5..1.0)).collect()).collect();
        let admitted = bank.update(&feats, &alphas).unwrap();
        for j in 0..n {
            let keep: Vec<usize> = (0..b).filter(|&i| alphas[j][i] > tau).collect();
            assert_eq!(admitted[j], keep.len());
            for c in 0..d {
                let expect = if keep.is_empty() {
                    centers.get(j, c)
                } else {
                    let mean = keep.iter().map(|&i| feats[j].get(i, c)).sum::<f64>() / keep.len() as f64;
                    m_u * centers.get(j, c) + (1.0 - m_u) * mean
                };
                assert!((bank.centers.get(j, c) - expect).abs() < 1e-6);
            }
        }
    }
}

pub fn invariance_scores_match_direct_softmax() {
    for t in 0..TRIALS {
        let mut r = rng(3000 + t);
        let (n, d) = (r.random_range(1..6), r.random_range(2..8));
        let regions = RegionFeatures(uniform(n, d, &mut r));
        let bank = MemoryBank::new(uniform(n, d, &mut r), 0.3, 0.85).unwrap();
        let beta = invariance_scores(&regions, &bank).unwrap();
        let sims: Vec<f64> = (0..n).map(|j| cos(regions.region(j), bank.centers.row(j))).collect();
        for (a, b) in beta.iter().zip(softmax(&sims)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

pub fn aggregate_distance_matches_direct_formula() {
    for t in 0..TRIALS {
        let mut r = rng(4000 + t);
        let (n, d) = (r.random_range(1..5), r.random_range(2..8));
        let wq = softmax(&(0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let wg = softmax(&(0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let q = entry(uniform(1, d, &mut r).into_vec(), uniform(n, d, &mut r), wq.clone(), 1, 1);
        let g = entry(uniform(1, d, &mut r).into_vec(), uniform(n, d, &mut r), wg.clone(), 2, 2);
        let mut num = 1.0 - cos(&q.global, &g.global);
        let mut den = 1.0;
        for j in 0..n {
            num += wq[j] * wg[j] * (1.0 - cos(q.regions.row(j), g.regions.row(j)));
            den += wq[j] * wg[j];
        }
        assert!((aggregate_distance(&q, &g).unwrap() - num / den).abs() < 1e-6);
    }
}

pub fn momentum_limits() {
    let c = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let v = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();

    let mut frozen = MemoryBank::new(c.clone(), 1.0, 0.85).unwrap();
    frozen.update(std::slice::from_ref(&v), &[vec![0.99]]).unwrap();
    assert_eq!(frozen.centers, c);

    let mut replace = MemoryBank::new(c.clone(), 0.0, 0.85).unwrap();
    replace.update(std::slice::from_ref(&v), &[vec![0.99]]).unwrap();
    assert_eq!(replace.centers, v);

    let mut mixed = MemoryBank::new(c.clone(), 0.3, 0.85).unwrap();
    mixed.update(std::slice::from_ref(&v), &[vec![0.9]]).unwrap();
    assert!((mixed.centers.get(0, 0) - 0.3).abs() < 1e-12);
    assert!((mixed.centers.get(0, 1) - 0.7).abs() < 1e-12);

    let mut rejected = MemoryBank::new(c.clone(), 0.3, 0.85).unwrap();
    assert_eq!(rejected.update(&[v], &[vec![0.85]]).unwrap(), vec![0]);
    assert_eq!(rejected.centers, c);
}

pub fn score_closed_forms() {
    let e = std::f64::consts::E;
    let eye = Matrix::from_vec(4, 4, (0..16).map(|i| f64::from(i % 5 == 0)).collect()).unwrap();
    // s = (1, 0, 0, 0): region 1 on its center, the others orthogonal
    let mut feats = Matrix::zeros(4, 4);
    feats.set(0, 0, 1.0);
    for j in 1..4 {
        feats.set(j, (j + 1) % 4, 1.0);
    }
    let bank = MemoryBank::new(eye, 0.3, 0.85).unwrap();
    let beta = invariance_scores(&RegionFeatures(feats), &bank).unwrap();
    assert!((beta[0] - e / (e + 3.0)).abs() < 1e-12);
    assert!((beta[0] - 0.4754).abs() < 1e-4);
    for b in &beta[1..] {
        assert!((b - 1.0 / (e + 3.0)).abs() < 1e-12);
        assert!((b - 0.1749).abs() < 1e-4);
    }

    let w = combine_scores(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4], Fusion::Sum).unwrap();
    assert!((w[0] - 0.4754).abs() < 1e-4);
    let w = combine_scores(&[0.3; 4], &[0.25; 4], Fusion::Sum).unwrap();
    assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-12));

    let regions = RegionFeatures(Matrix::from_vec(2, 2, vec![1.0, 0.0, -2.0, 0.0]).unwrap());
    let alpha = discrimination_scores(&regions, &[1.0, 5.0]).unwrap();
    assert!((alpha[0] - 0.7311).abs() < 1e-4);
    assert!(discrimination_scores(&regions, &[0.0, 0.0]).unwrap().iter().all(|&a| a == 0.5));
}

pub fn zero_weights_fall_back_to_global_distance() {
    let mut r = rng(5);
    let q = entry(vec![1.0, 2.0, 0.5], uniform(3, 3, &mut r), vec![0.0; 3], 1, 1);
    let g = entry(vec![0.5, -1.0, 2.0], uniform(3, 3, &mut r), vec![0.2, 0.3, 0.5], 2, 1);
    let dg = cosine_distance(&q.global, &g.global).unwrap();
    assert_eq!(aggregate_distance(&q, &g).unwrap(), dg);
    // degenerate region features are never touched when their weight is zero
    let q0 = entry(q.global.clone(), Matrix::zeros(3, 3), vec![0.0; 3], 1, 1);
    assert_eq!(aggregate_distance(&q0, &g).unwrap(), dg);
}
