//! Parameterised building blocks shared by the backbone, projector and decoder.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// `y = x · W (+ b)` with `W: [in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn(d_in, d_out, std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = x.matmul(store.get(self.w));
        if let Some(b) = self.b {
            let b = store.get(b);
            for r in 0..y.rows {
                for (o, v) in y.row_mut(r).iter_mut().zip(&b.data) {
                    *o += v;
                }
            }
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (gm, bt) = (store.get(self.gamma), store.get(self.beta));
        let mut out = x.clone();
        let c = x.cols;
        for r in 0..x.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            for j in 0..c {
                row[j] = (row[j] - mean) * rs * gm.data[j] + bt.data[j];
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head scaled dot-product attention on already-projected `q`, `k`, `v`.
/// `causal_offset = Some(o)` lets query row `i` see key rows `0..=o+i`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize, causal_offset: Option<usize>) -> Var {
    let d = g.value(q).cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, scale);
        let p = match causal_offset {
            Some(o) => g.causal_softmax(s, o),
            None => g.softmax(s),
        };
        heads.push(g.matmul(p, vh));
    }
    if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    }
}

/// Plain-tensor counterpart of [`attention`] that also returns the head-averaged
/// attention probabilities `[Tq × Tk]`.
pub fn attention_eval(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, causal_offset: Option<usize>) -> (Tensor, Tensor) {
    let d = q.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (tq, tk) = (q.rows, k.rows);
    let mut out = Tensor::zeros(tq, d);
    let mut avg = Tensor::zeros(tq, tk);
    let mut scores = vec![0.0; tk];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..tq {
            let visible = causal_offset.map(|o| (o + i + 1).min(tk)).unwrap_or(tk);
            let qi = &q.row(i)[off..off + dh];
            for (j, s) in scores.iter_mut().enumerate().take(visible) {
                let kj = &k.row(j)[off..off + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            super::tensor::softmax_in_place(&mut scores[..visible]);
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (j, p) in scores.iter().enumerate().take(visible) {
                let vj = &v.row(j)[off..off + dh];
                for (o, x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
                *avg.at_mut(i, j) += p / n_heads as f64;
            }
        }
    }
    (out, avg)
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, zero_out: bool, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng);
        let fc2 = if zero_out {
            Linear::zeros(store, &format!("{name}.fc2"), hidden, d, true)
        } else {
            Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng)
        };
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let h = self.fc1.apply(store, x).map(super::tensor::gelu);
        self.fc2.apply(store, &h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.param_ids();
        v.extend(self.fc2.param_ids());
        v
    }
}
