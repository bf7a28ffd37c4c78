//! Vision projector and adapter-equipped causal decoder, in differentiable
//! (graph) form and in a cached inference form.

use std::sync::Arc;

use rand::Rng;

use crate::nn::graph::rope_row;
use crate::nn::layers::{attention, attention_eval, FeedForward, LayerNorm, Linear};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// Query-token cross-attention pooler followed by a two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Projector {
    pub queries: ParamId,
    pub ln_in: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub heads: usize,
}

impl Projector {
    pub fn new<R: Rng>(store: &mut ParamStore, c_in: usize, m: usize, hidden: usize, d_model: usize, heads: usize, rng: &mut R) -> Self {
        let queries = store.add("projector.queries", Tensor::randn(m, c_in, 1.0, rng));
        Self {
            queries,
            ln_in: LayerNorm::new(store, "projector.ln_in", c_in),
            q: Linear::new(store, "projector.attn.q", c_in, c_in, true, rng),
            k: Linear::new(store, "projector.attn.k", c_in, c_in, true, rng),
            v: Linear::new(store, "projector.attn.v", c_in, c_in, true, rng),
            o: Linear::new(store, "projector.attn.o", c_in, c_in, true, rng),
            mlp1: Linear::new(store, "projector.mlp.fc1", c_in, hidden, true, rng),
            mlp2: Linear::new(store, "projector.mlp.fc2", hidden, d_model, true, rng),
            heads,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.queries];
        v.extend(self.ln_in.param_ids());
        for l in [&self.q, &self.k, &self.v, &self.o, &self.mlp1, &self.mlp2] {
            v.extend(l.param_ids());
        }
        v
    }

    /// `[N × C_in]` visual tokens to `[M × d_model]` image embeddings.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, visual: Var) -> Var {
        let kv = self.ln_in.forward(g, s, visual);
        let qp = g.param(s, self.queries);
        let q = self.q.forward(g, s, qp);
        let k = self.k.forward(g, s, kv);
        let v = self.v.forward(g, s, kv);
        let a = attention(g, q, k, v, self.heads, None);
        let a = self.o.forward(g, s, a);
        let pooled = g.add(a, qp);
        let h = self.mlp1.forward(g, s, pooled);
        let h = g.gelu(h);
        self.mlp2.forward(g, s, h)
    }

    pub fn apply(&self, s: &ParamStore, visual: &Tensor) -> Tensor {
        let mut g = Graph::frozen();
        let v = g.constant(visual.clone());
        let out = self.forward(&mut g, s, v);
        g.value(out).clone()
    }
}

/// Low-rank update `(α/r)·A·B` added to one projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    /// Adapters for `q`, `k`, `v`, `o`.
    pub lora: [LoraPair; 4],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub lora_scale: f64,
}

/// Whether the adapter branch participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapters {
    Off,
    On,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        d: usize,
        n_blocks: usize,
        heads: usize,
        ffn_mult: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let embed = store.add("decoder.embed", Tensor::randn(vocab, d, 1.0, rng));
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let n = format!("decoder.block{b}");
            let ln1 = LayerNorm::new(store, &format!("{n}.ln1"), d);
            let q = Linear::new(store, &format!("{n}.attn.q"), d, d, false, rng);
            let k = Linear::new(store, &format!("{n}.attn.k"), d, d, false, rng);
            let v = Linear::new(store, &format!("{n}.attn.v"), d, d, false, rng);
            let o = Linear::new(store, &format!("{n}.attn.o"), d, d, false, rng);
            let ln2 = LayerNorm::new(store, &format!("{n}.ln2"), d);
            let ffn = FeedForward::new(store, &format!("{n}.ffn"), d, d * ffn_mult, false, rng);
            let lora = ["q", "k", "v", "o"].map(|t| LoraPair {
                a: store.add(format!("lora.block{b}.{t}.a"), Tensor::randn(d, rank, 1.0 / (d as f64).sqrt(), rng)),
                b: store.add(format!("lora.block{b}.{t}.b"), Tensor::zeros(rank, d)),
            });
            blocks.push(DecoderBlock { ln1, q, k, v, o, ln2, ffn, lora });
        }
        let ln_f = LayerNorm::new(store, "decoder.ln_f", d);
        let head = Linear::new(store, "decoder.head", d, vocab, true, rng);
        Self { embed, blocks, ln_f, head, heads, d_model: d, lora_scale: alpha / rank as f64 }
    }

    /// Base (non-adapter) parameters.
    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.ln1.param_ids());
            for l in [&b.q, &b.k, &b.v, &b.o] {
                v.extend(l.param_ids());
            }
            v.extend(b.ln2.param_ids());
            v.extend(b.ffn.param_ids());
        }
        v.extend(self.ln_f.param_ids());
        v.extend(self.head.param_ids());
        v
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.lora.iter().flat_map(|p| [p.a, p.b])).collect()
    }

    fn proj(&self, g: &mut Graph, s: &ParamStore, lin: &Linear, lora: LoraPair, x: Var, ad: Adapters) -> Var {
        let y = lin.forward(g, s, x);
        if ad == Adapters::Off {
            return y;
        }
        let a = g.param(s, lora.a);
        let b = g.param(s, lora.b);
        let xa = g.matmul(x, a);
        let xab = g.matmul(xa, b);
        let d = g.scale(xab, self.lora_scale);
        g.add(y, d)
    }

    fn proj_apply(&self, s: &ParamStore, lin: &Linear, lora: LoraPair, x: &Tensor, ad: Adapters) -> Tensor {
        let mut y = lin.apply(s, x);
        if ad == Adapters::On {
            let d = x.matmul(s.get(lora.a)).matmul(s.get(lora.b));
            for (o, v) in y.data.iter_mut().zip(&d.data) {
                *o += self.lora_scale * v;
            }
        }
        y
    }

    pub fn embed_ids(&self, g: &mut Graph, s: &ParamStore, ids: &[usize]) -> Var {
        let e = g.param(s, self.embed);
        g.gather_rows(e, Arc::new(ids.to_vec()))
    }

    /// Logits for rows `logits_from..T` of the input sequence `x: [T × d]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, logits_from: usize, ad: Adapters) -> Var {
        let t = g.value(x).rows;
        let positions = Arc::new((0..t).collect::<Vec<_>>());
        let hd = self.d_model / self.heads;
        let mut x = x;
        for b in &self.blocks {
            let h = b.ln1.forward(g, s, x);
            let q = self.proj(g, s, &b.q, b.lora[0], h, ad);
            let k = self.proj(g, s, &b.k, b.lora[1], h, ad);
            let v = self.proj(g, s, &b.v, b.lora[2], h, ad);
            let q = g.rope(q, positions.clone(), hd);
            let k = g.rope(k, positions.clone(), hd);
            let a = attention(g, q, k, v, self.heads, Some(0));
            let o = self.proj(g, s, &b.o, b.lora[3], a, ad);
            x = g.add(x, o);
            let h2 = b.ln2.forward(g, s, x);
            let f = b.ffn.forward(g, s, h2);
            x = g.add(x, f);
        }
        let xs = g.slice_rows(x, logits_from, t - logits_from);
        let xf = self.ln_f.forward(g, s, xs);
        self.head.forward(g, s, xf)
    }
}

/// Keys and values of every processed position, per block.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub len: usize,
}

fn append_rows(dst: &mut Tensor, src: &Tensor) {
    if dst.rows == 0 {
        *dst = src.clone();
    } else {
        dst.data.extend_from_slice(&src.data);
        dst.rows += src.rows;
    }
}

impl Decoder {
    /// Processes `x` (new rows at positions `cache.len..`) and returns the
    /// final-layer hidden rows plus, per block, the head-averaged attention of
    /// the last new row over all positions so far.
    pub fn step(&self, s: &ParamStore, x: &Tensor, cache: &mut KvCache, ad: Adapters) -> (Tensor, Vec<Vec<f64>>) {
        if cache.k.is_empty() {
            cache.k = vec![Tensor::zeros(0, self.d_model); self.blocks.len()];
            cache.v = vec![Tensor::zeros(0, self.d_model); self.blocks.len()];
        }
        let start = cache.len;
        let hd = self.d_model / self.heads;
        let mut x = x.clone();
        let mut last_attn = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply(s, &x);
            let mut q = self.proj_apply(s, &b.q, b.lora[0], &h, ad);
            let mut k = self.proj_apply(s, &b.k, b.lora[1], &h, ad);
            let v = self.proj_apply(s, &b.v, b.lora[2], &h, ad);
            for r in 0..q.rows {
                rope_row(q.row_mut(r), start + r, hd, false);
                rope_row(k.row_mut(r), start + r, hd, false);
            }
            append_rows(&mut cache.k[bi], &k);
            append_rows(&mut cache.v[bi], &v);
            let (a, probs) = attention_eval(&q, &cache.k[bi], &cache.v[bi], self.heads, Some(start));
            last_attn.push(probs.row(probs.rows - 1).to_vec());
            let o = self.proj_apply(s, &b.o, b.lora[3], &a, ad);
            x.add_assign(&o);
            let h2 = b.ln2.apply(s, &x);
            let f = b.ffn.apply(s, &h2);
            x.add_assign(&f);
        }
        cache.len += x.rows;
        (x, last_attn)
    }

    pub fn logits_of(&self, s: &ParamStore, hidden_row: &[f64]) -> Vec<f64> {
        let x = Tensor::row_vector(hidden_row.to_vec());
        let xf = self.ln_f.apply(s, &x);
        self.head.apply(s, &xf).data
    }

    pub fn embed_apply(&self, s: &ParamStore, ids: &[usize]) -> Tensor {
        let e = s.get(self.embed);
        let mut out = Tensor::zeros(ids.len(), e.cols);
        for (i, id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(e.row(*id));
        }
        out
    }
}
