//! A reverse-mode tape over [`Matrix`] values.
//!
//! Every node records the operation that produced it. [`Graph::backward`]
//! walks the tape once in reverse, so nodes must be created in topological
//! order, which the builder methods guarantee by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct TripletTerm {
    anchor: usize,
    positive: usize,
    negative: usize,
    d_pos: f64,
    d_neg: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddBlock { x: Var, block: Var },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    SoftmaxRows(Var),
    BlockLeftMul { w: Var, x: Var },
    BlockMeanRows { x: Var, block: usize },
    MeanRows(Var),
    MaskedPool { masks: Var, features: Var, block: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Nll { probs: Var, targets: Vec<usize> },
    CrossEntropy {
        logits: Var,
        weights: Option<Var>,
        targets: Vec<usize>,
        probs: Matrix,
        losses: Vec<f64>,
    },
    Triplet { x: Var, terms: Vec<TripletTerm> },
    Patchify { image: Var, height: usize, width: usize, patch: usize },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros shaped like the node when it never received one.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Matrix {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = g.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of `v`'s value, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a 1 x n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vr.shape()),
            ));
        }
        let mut value = va.clone();
        let cols = va.cols();
        for chunk in value.as_mut_slice().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(vr.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Adds the `P x n` matrix `block` to each consecutive `P`-row block of `x`.
    pub fn add_block(&mut self, x: Var, block: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(block));
        if vb.cols() != vx.cols() || vb.rows() == 0 || vx.rows() % vb.rows() != 0 {
            return Err(shape_err(
                "add_block",
                format!("{:?} + block {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut value = vx.clone();
        let n = vb.len();
        for chunk in value.as_mut_slice().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(vb.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(block);
        Ok(self.push(value, Op::AddBlock { x, block }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn row_normalize(&mut self, x: Var, what: &'static str) -> Result<Var> {
        let vx = self.value(x);
        let mut value = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let n = tensor::norm(vx.row(r));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateNorm { what, index: r });
            }
            for v in value.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowNormalize { x, norms }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut value = Matrix::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            value.row_mut(r).copy_from_slice(&tensor::softmax(vx.row(r)));
        }
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Left-multiplies each `P`-row block of `x` by the `P x P` matrix `w`.
    pub fn block_left_mul(&mut self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        let p = vw.rows();
        if vw.cols() != p || p == 0 || vx.rows() % p != 0 {
            return Err(shape_err(
                "block_left_mul",
                format!("{:?} x blocks of {:?}", vw.shape(), vx.shape()),
            ));
        }
        let n = vx.cols();
        let mut value = Matrix::zeros(vx.rows(), n);
        for (xb, ob) in vx
            .as_slice()
            .chunks(p * n)
            .zip(value.as_mut_slice().chunks_mut(p * n))
        {
            gemm_acc(p, p, n, vw.as_slice(), xb, ob);
        }
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(value, Op::BlockLeftMul { w, x }, rg))
    }

    /// Mean of each consecutive `block`-row group, one output row per group.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let vx = self.value(x);
        if block == 0 || vx.rows() % block != 0 {
            return Err(shape_err(
                "block_mean_rows",
                format!("{} rows in blocks of {block}", vx.rows()),
            ));
        }
        let groups = vx.rows() / block;
        let n = vx.cols();
        let mut value = Matrix::zeros(groups, n);
        let inv = 1.0 / block as f64;
        for g in 0..groups {
            for r in g * block..(g + 1) * block {
                for (o, v) in value.row_mut(g).iter_mut().zip(vx.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::BlockMeanRows { x, block }, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if rows == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let value = self.value(x).col_sums().scale(1.0 / rows as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Masked average pooling.
    ///
    /// `masks` is `(B*P) x M` with channel 0 the background, `features` is
    /// `(B*P) x n`. The output is region-major: row `(j-1)*B + b` holds the
    /// pooled feature of class `j` (1..M) for image `b`.
    pub fn masked_pool(&mut self, masks: Var, features: Var, block: usize) -> Result<Var> {
        let (vs, vf) = (self.value(masks), self.value(features));
        if vs.rows() != vf.rows() || block == 0 || vf.rows() % block != 0 || vs.cols() < 2 {
            return Err(shape_err(
                "masked_pool",
                format!("masks {:?}, features {:?}, block {block}", vs.shape(), vf.shape()),
            ));
        }
        let batch = vf.rows() / block;
        let classes = vs.cols() - 1;
        let n = vf.cols();
        let mut value = Matrix::zeros(classes * batch, n);
        for b in 0..batch {
            for j in 0..classes {
                let mut z = 0.0;
                let out_row = (j * batch + b) * n;
                for p in b * block..(b + 1) * block {
                    let s = vs.get(p, j + 1);
                    z += s;
                    let out = &mut value.as_mut_slice()[out_row..out_row + n];
                    for (o, f) in out.iter_mut().zip(vf.row(p)) {
                        *o += s * f;
                    }
                }
                if z <= 0.0 {
                    return Err(Error::DegenerateNorm {
                        what: "mask mass",
                        index: j + 1,
                    });
                }
                for o in &mut value.as_mut_slice()[out_row..out_row + n] {
                    *o /= z;
                }
            }
        }
        let rg = self.rg(masks) || self.rg(features);
        Ok(self.push(
            value,
            Op::MaskedPool {
                masks,
                features,
                block,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {}", vx.rows()),
            ));
        }
        let value = vx.select_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{end} of {}", vx.cols()),
            ));
        }
        let mut value = Matrix::zeros(vx.rows(), end - start);
        for r in 0..vx.rows() {
            value.row_mut(r).copy_from_slice(&vx.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::stack_rows(&mats)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let data = self.value(x).as_slice().to_vec();
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean negative log-probability of `targets[i]` in row `i` of `probs`.
    pub fn nll_rows(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let vp = self.value(probs);
        if vp.rows() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "nll_rows",
                format!("{} targets for {} rows", targets.len(), vp.rows()),
            ));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vp.cols() {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    classes: vp.cols() - 1,
                });
            }
            total -= libm::log(vp.get(r, t));
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `(1/R) * sum_i w_i * CE(logits_i, targets_i)`; `weights` is `R x 1`
    /// and defaults to all ones.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<Var>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let rows = vl.rows();
        if rows != targets.len() || rows == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(w) = weights {
            if self.value(w).shape() != (rows, 1) {
                return Err(shape_err(
                    "cross_entropy",
                    format!("weights {:?} for {rows} rows", self.value(w).shape()),
                ));
            }
        }
        let mut probs = Matrix::zeros(rows, vl.cols());
        let mut losses = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= vl.cols() {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    classes: vl.cols(),
                });
            }
            let row = vl.row(r);
            losses.push(tensor::log_sum_exp(row) - row[t]);
            probs.row_mut(r).copy_from_slice(&tensor::softmax(row));
        }
        let total: f64 = match weights {
            Some(w) => {
                let vw = self.value(w);
                losses.iter().enumerate().map(|(r, l)| vw.get(r, 0) * l).sum()
            }
            None => losses.iter().sum(),
        };
        let value = Matrix::scalar(total / rows as f64);
        let rg = self.rg(logits) || weights.is_some_and(|w| self.rg(w));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                weights,
                targets: targets.to_vec(),
                probs,
                losses,
            },
            rg,
        ))
    }

    /// Batch-hard triplet loss on Euclidean distances.
    ///
    /// The hardest positive ranges over same-label rows including the anchor
    /// itself; every anchor needs at least one row with a different label.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows();
        if labels.len() != n || n == 0 {
            return Err(shape_err(
                "batch_hard_triplet",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        let dist = |i: usize, j: usize| -> f64 {
            let s: f64 = vx
                .row(i)
                .iter()
                .zip(vx.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            libm::sqrt(s)
        };
        let mut terms = Vec::new();
        let mut total = 0.0;
        for a in 0..n {
            let mut pos = (a, 0.0);
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist(a, j);
                if labels[j] == labels[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let Some(neg) = neg else {
                return Err(Error::Batch(format!(
                    "anchor {a} (label {}) has no negative in the batch",
                    labels[a]
                )));
            };
            let hinge = margin + pos.1 - neg.1;
            if hinge > 0.0 {
                total += hinge;
                terms.push(TripletTerm {
                    anchor: a,
                    positive: pos.0,
                    negative: neg.0,
                    d_pos: pos.1,
                    d_neg: neg.1,
                });
            }
        }
        let value = Matrix::scalar(total / n as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Triplet { x, terms }, rg))
    }

    /// Cuts a `C x (H*W)` image into non-overlapping `patch x patch` tiles,
    /// one row per tile in row-major tile order.
    pub fn patchify(&mut self, image: Var, height: usize, width: usize, patch: usize) -> Result<Var> {
        let vi = self.value(image);
        if vi.cols() != height * width || patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(shape_err(
                "patchify",
                format!(
                    "image {:?} as {height}x{width} in {patch}px patches",
                    vi.shape()
                ),
            ));
        }
        let channels = vi.rows();
        let (ph, pw) = (height / patch, width / patch);
        let cols = channels * patch * patch;
        let mut value = Matrix::zeros(ph * pw, cols);
        for_each_patch_pixel(channels, height, width, patch, |tile, col, pix, c| {
            value.set(tile, col, vi.get(c, pix));
        });
        let rg = self.rg(image);
        Ok(self.push(
            value,
            Op::Patchify {
                image,
                height,
                width,
                patch,
            },
            rg,
        ))
    }

    /// Sum of 1x1 nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(shape_err("sum", format!("non-scalar {:?}", v.shape())));
            }
            total += v.item();
        }
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(Matrix::scalar(total), Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = {
            let (r, c) = self.value(loss).shape();
            Matrix::filled(r, c, 1.0)
        };
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized above"));
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                self.accumulate(grads, *a, |ga| {
                    gemm_nt_acc(m, n, k, g.as_slice(), vb.as_slice(), ga.as_mut_slice())
                });
                self.accumulate(grads, *b, |gb| {
                    gemm_tn_acc(k, m, n, va.as_slice(), g.as_slice(), gb.as_mut_slice())
                });
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T with A m x k, B n x k.
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                self.accumulate(grads, *a, |ga| {
                    gemm_acc(m, n, k, g.as_slice(), vb.as_slice(), ga.as_mut_slice())
                });
                self.accumulate(grads, *b, |gb| {
                    gemm_tn_acc(n, m, k, g.as_slice(), va.as_slice(), gb.as_mut_slice())
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *row, |gr| gr.add_assign(&g.col_sums()));
            }
            Op::AddBlock { x, block } => {
                self.accumulate(grads, *x, |gx| gx.add_assign(g));
                self.accumulate(grads, *block, |gb| {
                    let n = gb.len();
                    for chunk in g.as_slice().chunks(n) {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, v) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += c * v;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), yv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), yv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                self.accumulate(grads, *x, |gx| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = tensor::dot(yr, gr);
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv * proj) / n;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = tensor::dot(yr, gr);
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - proj);
                        }
                    }
                });
            }
            Op::BlockLeftMul { w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let p = vw.rows();
                let n = vx.cols();
                self.accumulate(grads, *w, |gw| {
                    for (gb, xb) in g.as_slice().chunks(p * n).zip(vx.as_slice().chunks(p * n)) {
                        gemm_nt_acc(p, n, p, gb, xb, gw.as_mut_slice());
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (gb, ob) in g
                        .as_slice()
                        .chunks(p * n)
                        .zip(gx.as_mut_slice().chunks_mut(p * n))
                    {
                        gemm_tn_acc(p, p, n, vw.as_slice(), gb, ob);
                    }
                });
            }
            Op::BlockMeanRows { x, block } => {
                let inv = 1.0 / *block as f64;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..gx.rows() {
                        let gr = g.row(r / block);
                        for (o, v) in gx.row_mut(r).iter_mut().zip(gr) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                self.accumulate(grads, *x, |gx| {
                    let inv = 1.0 / gx.rows() as f64;
                    for r in 0..gx.rows() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::MaskedPool {
                masks,
                features,
                block,
            } => {
                let (vs, vf) = (self.value(*masks), self.value(*features));
                let y = &node.value;
                let batch = vf.rows() / block;
                let classes = vs.cols() - 1;
                let mut z = vec![0.0; batch * classes];
                for b in 0..batch {
                    for j in 0..classes {
                        z[j * batch + b] =
                            (b * block..(b + 1) * block).map(|p| vs.get(p, j + 1)).sum();
                    }
                }
                self.accumulate(grads, *features, |gf| {
                    for b in 0..batch {
                        for p in b * block..(b + 1) * block {
                            for j in 0..classes {
                                let coef = vs.get(p, j + 1) / z[j * batch + b];
                                let gr = g.row(j * batch + b);
                                for (o, v) in gf.row_mut(p).iter_mut().zip(gr) {
                                    *o += coef * v;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *masks, |gs| {
                    for b in 0..batch {
                        for j in 0..classes {
                            let row = j * batch + b;
                            let gr = g.row(row);
                            let yr = y.row(row);
                            let base = tensor::dot(gr, yr);
                            for p in b * block..(b + 1) * block {
                                let v = (tensor::dot(gr, vf.row(p)) - base) / z[row];
                                let idx = p * gs.cols() + j + 1;
                                gs.as_mut_slice()[idx] += v;
                            }
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                self.accumulate(grads, *x, |gx| {
                    let n = gx.cols();
                    let dst = &mut gx.as_mut_slice()[start * n..start * n + g.len()];
                    for (o, v) in dst.iter_mut().zip(g.as_slice()) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                self.accumulate(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        let dst = &mut gx.row_mut(r)[*start..start + g.cols()];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let src = &g.as_slice()[offset..offset + len];
                    self.accumulate(grads, p, |gp| {
                        for (o, v) in gp.as_mut_slice().iter_mut().zip(src) {
                            *o += v;
                        }
                    });
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, |gx| gx.add_assign(&g.transpose()));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += v;
                    }
                });
            }
            Op::Nll { probs, targets } => {
                let vp = self.value(*probs);
                let scale = g.item() / targets.len() as f64;
                self.accumulate(grads, *probs, |gp| {
                    for (r, &t) in targets.iter().enumerate() {
                        let idx = r * gp.cols() + t;
                        gp.as_mut_slice()[idx] -= scale / vp.get(r, t);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                weights,
                targets,
                probs,
                losses,
            } => {
                let rows = targets.len();
                let scale = g.item() / rows as f64;
                let w_at = |r: usize| weights.map_or(1.0, |w| self.value(w).get(r, 0));
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let c = scale * w_at(r);
                        for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += c * p;
                        }
                        let idx = r * gl.cols() + t;
                        gl.as_mut_slice()[idx] -= c;
                    }
                });
                if let Some(w) = weights {
                    self.accumulate(grads, *w, |gw| {
                        for (o, l) in gw.as_mut_slice().iter_mut().zip(losses) {
                            *o += scale * l;
                        }
                    });
                }
            }
            Op::Triplet { x, terms } => {
                let vx = self.value(*x);
                let scale = g.item() / vx.rows() as f64;
                self.accumulate(grads, *x, |gx| {
                    let cols = gx.cols();
                    let mut push = |i: usize, j: usize, d: f64, sign: f64| {
                        if d == 0.0 {
                            return;
                        }
                        for c in 0..cols {
                            let diff = (vx.get(i, c) - vx.get(j, c)) / d * sign * scale;
                            gx.as_mut_slice()[i * cols + c] += diff;
                            gx.as_mut_slice()[j * cols + c] -= diff;
                        }
                    };
                    for t in terms {
                        push(t.anchor, t.positive, t.d_pos, 1.0);
                        push(t.anchor, t.negative, t.d_neg, -1.0);
                    }
                });
            }
            Op::Patchify {
                image,
                height,
                width,
                patch,
            } => {
                let channels = self.value(*image).rows();
                self.accumulate(grads, *image, |gi| {
                    for_each_patch_pixel(channels, *height, *width, *patch, |tile, col, pix, c| {
                        let idx = c * gi.cols() + pix;
                        gi.as_mut_slice()[idx] += g.get(tile, col);
                    });
                });
            }
            Op::Sum(parts) => {
                let gv = g.item();
                for &p in parts {
                    self.accumulate(grads, p, |gp| gp.as_mut_slice()[0] += gv);
                }
            }
        }
    }
}

fn for_each_patch_pixel(
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let pw = width / patch;
    for py in 0..height / patch {
        for px in 0..pw {
            let tile = py * pw + px;
            for c in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let col = c * patch * patch + dy * patch + dx;
                        let pix = (py * patch + dy) * width + px * patch + dx;
                        f(tile, col, pix, c);
                    }
                }
            }
        }
    }
}
