//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! whatever it needs for the backward pass. Parameters enter the tape through
//! [`Graph::param`]; whether they receive gradients is decided by the graph's
//! trainable set, so frozen weights never accumulate a gradient at all.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gelu, gelu_grad, gemm, sigmoid, softmax_in_place, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SegmentMean { x: Var, groups: Arc<Vec<Vec<usize>>> },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    Rope { x: Var, positions: Arc<Vec<usize>>, head_dim: usize },
    CrossEntropy { logits: Var, targets: Arc<Vec<Option<usize>>>, probs: Tensor, count: usize },
    WeightedBce { logits: Var, targets: Arc<Tensor>, pos_weight: Arc<Vec<f64>>, include: Arc<Vec<bool>>, denom: f64 },
    SumAll(Var),
    Dot(Var, Arc<Tensor>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub const ROPE_BASE: f64 = 10_000.0;
const LN_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Option<Arc<HashSet<ParamId>>>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Every parameter is trainable.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), trainable: None, grads: Vec::new() }
    }

    /// Only parameters in `trainable` receive gradients; everything else is a constant.
    pub fn with_trainable(trainable: Arc<HashSet<ParamId>>) -> Self {
        Self { trainable: Some(trainable), ..Self::new() }
    }

    /// No parameter receives gradients (inference).
    pub fn frozen() -> Self {
        Self::with_trainable(Arc::new(HashSet::new()))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for input-sensitivity checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let trainable = self.trainable.as_ref().map(|s| s.contains(&id)).unwrap_or(true);
        let v = self.push_arc(store.value_arc(id), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `[1 × cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine `[1 × cols]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                *xhat.at_mut(i, j) = h;
                *out.at_mut(i, j) = h * g.data[j] + b.data[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row-wise softmax where row `i` may only see columns `0..=offset + i`.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols;
        for i in 0..out.rows {
            let visible = (offset + i + 1).min(cols);
            let row = out.row_mut(i);
            softmax_in_place(&mut row[..visible]);
            for v in &mut row[visible..] {
                *v = 0.0;
            }
        }
        let ng = self.ng(x);
        // Masked entries have zero probability, so the plain softmax backward is exact.
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(xv.rows, len);
        for i in 0..xv.rows {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&refs);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `g` is the mean of the input rows listed in `groups[g]`.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(groups.len(), xv.cols);
        for (g, members) in groups.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &m in members {
                for (o, v) in orow.iter_mut().zip(xv.row(m)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, groups }, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).rows;
        self.segment_mean(x, Arc::new(vec![(0..n).collect()]))
    }

    /// Output row `i` is input row `idx[i]` (embedding lookup, broadcasting).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, idx }, ng)
    }

    /// Rotary position embedding applied independently to each `head_dim` chunk.
    pub fn rope(&mut self, x: Var, positions: Arc<Vec<usize>>, head_dim: usize) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.rows, positions.len(), "rope needs one position per row");
        for (i, &p) in positions.iter().enumerate() {
            rope_row(out.row_mut(i), p, head_dim, false);
        }
        let ng = self.ng(x);
        self.push(out, Op::Rope { x, positions, head_dim }, ng)
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<Option<usize>>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            softmax_in_place(probs.row_mut(i));
            if let Some(t) = t {
                loss -= probs.at(i, *t).max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        let ng = self.ng(logits);
        self.push(Tensor::scalar(value), Op::CrossEntropy { logits, targets, probs, count }, ng)
    }

    /// Class-weighted binary cross-entropy on logits, averaged over samples and
    /// included classes: `w_c·y·(−log σ(z)) + (1−y)·(−log(1−σ(z)))`.
    pub fn weighted_bce(&mut self, logits: Var, targets: Arc<Tensor>, pos_weight: Arc<Vec<f64>>, include: Arc<Vec<bool>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "weighted_bce target shape mismatch");
        assert_eq!(pos_weight.len(), z.cols);
        let n_inc = include.iter().filter(|b| **b).count();
        let denom = (z.rows * n_inc).max(1) as f64;
        let mut loss = 0.0;
        for i in 0..z.rows {
            for c in 0..z.cols {
                if !include[c] {
                    continue;
                }
                let (zi, y) = (z.at(i, c), targets.at(i, c));
                loss += pos_weight[c] * y * softplus(-zi) + (1.0 - y) * softplus(zi);
            }
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss / denom), Op::WeightedBce { logits, targets, pos_weight, include, denom }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// `Σ x ∘ w` for a constant `w`; a convenient scalar probe for gradient checks.
    pub fn dot_const(&mut self, x: Var, w: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), w.shape());
        let s = xv.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Dot(x, w), ng)
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter(|(_, v)| self.ng(**v))
            .map(|(id, v)| {
                let g = self.grad(*v).cloned().unwrap_or_else(|| {
                    let t = self.value(*v);
                    Tensor::zeros(t.rows, t.cols)
                });
                (*id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if self.ng(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(dy, false, bv, true, &mut da, 0.0);
                    acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(av, true, dy, false, &mut db, 0.0);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if self.ng(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(dy, false, bv, false, &mut da, 0.0);
                    acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(dy, true, av, false, &mut db, 0.0);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dy.clone());
                if self.ng(*row) {
                    let mut dr = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, v) in dr.data.iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    acc(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if self.ng(*a) {
                    let d = dy.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                    acc(grads, *a, Tensor::from_vec(dy.rows, dy.cols, d));
                }
                if self.ng(*b) {
                    let d = dy.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                    acc(grads, *b, Tensor::from_vec(dy.rows, dy.cols, d));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, dy.scale(*s)),
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                let d = dy.data.iter().zip(&av.data).map(|(g, x)| g * gelu_grad(*x)).collect();
                acc(grads, *a, Tensor::from_vec(dy.rows, dy.cols, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let g = &nodes[gamma.0].value;
                let (n, c) = dy.shape();
                if self.ng(*gamma) {
                    let mut dg = Tensor::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg.data[j] += dy.at(r, j) * xhat.at(r, j);
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..n {
                        for (o, v) in db.data.iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    acc(grads, *beta, db);
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(n, c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = dy.at(r, j) * g.data[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat.at(r, j);
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            *dx.at_mut(r, j) = rstd[r] * (dxhat[j] - mean_d - xhat.at(r, j) * mean_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..dy.rows {
                    dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols;
                    if self.ng(*p) {
                        let mut dp = Tensor::zeros(dy.rows, pc);
                        for r in 0..dy.rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + pc]);
                        }
                        acc(grads, *p, dp);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                dx.data[start * xv.cols..(start + dy.rows) * xv.cols].copy_from_slice(&dy.data);
                acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = nodes[p.0].value.rows;
                    if self.ng(*p) {
                        acc(grads, *p, dy.slice_rows(off, pr));
                    }
                    off += pr;
                }
            }
            Op::SegmentMean { x, groups } => {
                let xv = &nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (g, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (o, v) in dx.row_mut(m).iter_mut().zip(dy.row(g)) {
                            *o += v * inv;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = &nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(src).iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Rope { x, positions, head_dim } => {
                let mut dx = dy.clone();
                for (r, &p) in positions.iter().enumerate() {
                    rope_row(dx.row_mut(r), p, *head_dim, true);
                }
                acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = dy.item() / (*count).max(1) as f64;
                let mut dl = Tensor::zeros(probs.rows, probs.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for (o, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        *dl.at_mut(r, *t) -= scale;
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::WeightedBce { logits, targets, pos_weight, include, denom } => {
                let z = &nodes[logits.0].value;
                let scale = dy.item() / denom;
                let mut dz = Tensor::zeros(z.rows, z.cols);
                for r in 0..z.rows {
                    for c in 0..z.cols {
                        if include[c] {
                            *dz.at_mut(r, c) = scale * weighted_bce_logit_grad(z.at(r, c), targets.at(r, c), pos_weight[c]);
                        }
                    }
                }
                acc(grads, *logits, dz);
            }
            Op::SumAll(x) => {
                let xv = &nodes[x.0].value;
                acc(grads, *x, Tensor::full(xv.rows, xv.cols, dy.item()));
            }
            Op::Dot(x, w) => acc(grads, *x, w.scale(dy.item())),
        }
    }
}

/// Derivative of the per-logit weighted BCE term with respect to the logit.
pub fn weighted_bce_logit_grad(z: f64, y: f64, pos_weight: f64) -> f64 {
    let s = sigmoid(z);
    pos_weight * y * (s - 1.0) + (1.0 - y) * s
}

/// Rotates consecutive halves of each head chunk; `inverse` undoes the rotation.
pub fn rope_row(row: &mut [f64], pos: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for chunk in row.chunks_mut(head_dim) {
        for k in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * k as f64 / head_dim as f64);
            let theta = pos as f64 * freq;
            let (s, c) = theta.sin_cos();
            let s = if inverse { -s } else { s };
            let (a, b) = (chunk[k], chunk[k + half]);
            chunk[k] = a * c - b * s;
            chunk[k + half] = a * s + b * c;
        }
    }
}
