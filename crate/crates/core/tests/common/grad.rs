//! Analytic gradients against central finite differences.

use super::{rng, uniform};
use rand::Rng;
use rga_core::config::Config;
use rga_core::data::Image;
use rga_core::model::{named_gradients, Model, Stage};
use rga_core::objective::{total_loss_on_graph, ObjectiveInputs};
use rga_core::params::{Binder, Parameters};
use rga_core::ram::{alpha_on_graph, fuse_on_graph, ram_loss_on_graph, MemoryBank};
use rga_core::rgm::masks_on_graph;
use rga_core::{Graph, Matrix, Var};

const H: f64 = 1e-5;

/// `||a - n|| / max(||a||, ||n||)` over the checked entries.
fn vector_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Checks d loss / d inputs[i] for every input, where `build` turns the
/// input values into a scalar node.
fn check(inputs: &[Matrix], tol: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let eval = |values: &[Matrix]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.constant(m.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, vars[i]);
        let mut numeric = vec![0.0; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].as_mut_slice()[k] += H;
            let mut minus = inputs.to_vec();
            minus[i].as_mut_slice()[k] -= H;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let err = vector_rel_err(analytic.as_slice(), &numeric);
        assert!(err < tol, "input {i}: relative error {err:.3e}");
    }
}

pub fn segmentation_loss_through_masks() {
    let mut r = rng(11);
    let (batch, p, d, n) = (2, 6, 5, 3);
    let targets: Vec<usize> = (0..batch * p).map(|_| r.random_range(0..=n)).collect();
    let inputs = [uniform(batch * p, d, &mut r), uniform(n + 1, d, &mut r)];
    for gamma in [1.0, 5.0] {
        check(&inputs, 1e-4, |g, v| {
            let s = masks_on_graph(g, v[0], v[1], gamma).unwrap();
            g.nll_rows(s, &targets).unwrap()
        });
    }
}

pub fn pooled_regions_through_masks() {
    let mut r = rng(12);
    let (batch, p, d, n) = (2, 4, 3, 2);
    let head = uniform(d, 1, &mut r);
    let inputs = [uniform(batch * p, d, &mut r), uniform(n + 1, d, &mut r)];
    check(&inputs, 1e-4, |g, v| {
        let s = masks_on_graph(g, v[0], v[1], 3.0).unwrap();
        let regions = g.masked_pool(s, v[0], p).unwrap();
        let w = g.constant(head.clone());
        let y = g.matmul(regions, w).unwrap();
        let y = g.tanh(y);
        g.mean_rows(y).unwrap()
    });
}

pub fn ram_loss_with_constant_weights() {
    let mut r = rng(13);
    let (batch, n, d, ids) = (3, 2, 4, 5);
    let targets = vec![0, 3, 4];
    let w = Matrix::from_vec(n * batch, 1, (0..n * batch).map(|_| r.random_range(0.1..0.9)).collect()).unwrap();
    let inputs = [uniform(n * batch, d, &mut r), uniform(d, ids, &mut r), uniform(d, ids, &mut r)];
    check(&inputs, 1e-4, |g, v| {
        let wv = g.constant(w.clone());
        ram_loss_on_graph(g, v[0], wv, &v[1..], &targets).unwrap()
    });
}

pub fn confidence_weights_through_alpha() {
    let mut r = rng(14);
    let (batch, n, d, ids) = (2, 3, 4, 3);
    let targets = vec![1, 2];
    let beta = uniform(batch, n, &mut r);
    let inputs = [uniform(n * batch, d, &mut r), uniform(d, 1, &mut r), uniform(d, ids, &mut r), uniform(d, ids, &mut r), uniform(d, ids, &mut r)];
    check(&inputs, 1e-4, |g, v| {
        let a = alpha_on_graph(g, v[0], v[1]).unwrap();
        let w = fuse_on_graph(g, a, &beta, rga_core::ram::Fusion::Sum).unwrap();
        ram_loss_on_graph(g, v[0], w, &v[2..], &targets).unwrap()
    });
}

pub fn batch_hard_triplet() {
    let mut r = rng(15);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let inputs = [uniform(6, 4, &mut r)];
    for margin in [0.3, 5.0] {
        check(&inputs, 1e-4, |g, v| g.batch_hard_triplet(v[0], &labels, margin).unwrap());
    }
}

pub fn identity_cross_entropy() {
    let mut r = rng(16);
    let inputs = [uniform(3, 4, &mut r), uniform(4, 5, &mut r)];
    check(&inputs, 1e-4, |g, v| {
        let logits = g.matmul(v[0], v[1]).unwrap();
        g.cross_entropy(logits, &[0, 4, 2], None).unwrap()
    });
}

fn micro_config() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("image_height", "16"),
        ("image_width", "8"),
        ("patch_size", "4"),
        ("feature_dim", "6"),
        ("token_dim", "5"),
        ("context_len", "2"),
        ("mixing_blocks", "1"),
        ("gamma", "4"),
        ("seed", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn micro_images() -> Vec<Image> {
    let mut r = rng(17);
    (0..2)
        .map(|_| Image::new(16, 8, (0..3 * 16 * 8).map(|_| r.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

/// Joint objective on a fixed batch with the invariance scores held at
/// `beta` (they are statistics of the memory, not a differentiable input).
fn joint_loss(model: &Model, images: &[&Image], seg_targets: &[usize], beta: &Matrix, binder_graph: &mut Graph) -> (Var, rga_core::params::Bound) {
    let targets = [0usize, 1];
    let mut binder = Binder::new(binder_graph);
    let vars = model.bind(&mut binder, Stage::Joint).unwrap();
    let bound = binder.finish();
    let g = binder_graph;
    let fwd = model.forward(g, &vars, images).unwrap();
    let regions = fwd.regions.unwrap();
    let alpha = alpha_on_graph(g, regions, vars.ram.w_a).unwrap();
    let w = fuse_on_graph(g, alpha, beta, model.config.fusion).unwrap();
    let inp = ObjectiveInputs {
        regions: Some(regions),
        w: Some(w),
        w_b: &vars.ram.w_b,
        global: fwd.global,
        classifier: vars.classifier,
        targets: &targets,
        margin: model.config.margin,
    };
    let (total, _) = total_loss_on_graph(g, &inp).unwrap();
    let seg = g.nll_rows(fwd.masks.unwrap(), seg_targets).unwrap();
    (g.sum(&[total, seg]).unwrap(), bound)
}

pub fn total_loss_on_a_two_image_batch() {
    let config = micro_config();
    let mut model = Model::new(&config, 2, None).unwrap();
    let images = micro_images();
    let refs: Vec<&Image> = images.iter().collect();
    let maps = model.feature_maps(&refs).unwrap();
    model.memory = Some(MemoryBank::from_stripes(&maps, config.regions, config.momentum, config.tau).unwrap());
    let (gh, gw) = model.grid();
    let mut r = rng(18);
    let seg_targets: Vec<usize> = (0..2 * gh * gw).map(|_| r.random_range(0..=config.regions)).collect();
    let beta = {
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g);
        let vars = model.bind(&mut binder, Stage::Inference).unwrap();
        let fwd = model.forward(&mut g, &vars, &refs).unwrap();
        let rv = g.value(fwd.regions.unwrap()).clone();
        model.beta_matrix(&rv, 2).unwrap()
    };

    let mut g = Graph::new();
    let (loss, bound) = joint_loss(&model, &refs, &seg_targets, &beta, &mut g);
    let grads = named_gradients(&g, &bound, loss);
    assert!(grads.contains_key("ram.w_a") && grads.contains_key("encoder.patch_weight"));

    let eval = |m: &Model| {
        let mut g = Graph::new();
        let (l, _) = joint_loss(m, &refs, &seg_targets, &beta, &mut g);
        g.value(l).item()
    };
    let mut worst = (0.0f64, String::new());
    for (name, analytic) in &grads {
        // a spread of entries from every parameter keeps the run short
        let len = analytic.len();
        let picks: Vec<usize> = (0..len.min(6)).map(|i| i * len / len.min(6)).collect();
        let mut a = Vec::new();
        let mut numeric = Vec::new();
        for &k in &picks {
            let nudge = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut(&mut |n, v| {
                    if n == name {
                        v.as_mut_slice()[k] += delta;
                    }
                });
                eval(&m)
            };
            numeric.push((nudge(H) - nudge(-H)) / (2.0 * H));
            a.push(analytic.as_slice()[k]);
        }
        let err = vector_rel_err(&a, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    assert!(worst.0 < 1e-3, "worst relative error {:.3e} in `{}`", worst.0, worst.1);
}
