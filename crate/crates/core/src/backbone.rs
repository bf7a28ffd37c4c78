//! Multi-scale volumetric encoder.
//!
//! A patchification stem turns a windowed volume into the finest token grid,
//! non-overlapping mean pooling builds coarser grids, and `U` encoder stages
//! refine every scale with self-attention, a cross-scale exchange and a
//! feed-forward block. Tokens are stored as `[N × C]` matrices whose rows
//! follow the grid in `x`-major, then `y`, then `z` order.
//!
//! The stage-matched grids `h^(ℓ)_ℓ` feed the multi-scale embedding used by
//! the probes; one selected grid `h^(ℓ)_u` feeds the report generator.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{attention, FeedForward, LayerNorm, Linear};
use rand::seq::SliceRandom;

use crate::nn::checkpoint::{self, DType};
use crate::nn::params::{accumulate, scale_grads};
use crate::nn::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::questions::{QsId, QuestionSet};
use crate::rng::{derive, stream, streams};
use crate::synthdata::{make_dataset, Dataset, PhantomVolume};

pub const CHECKPOINT_KIND: &str = "dcppd-backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub grid: [usize; 3],
    pub patch: [usize; 3],
    pub c_in: usize,
    /// One stride triple per coarsening step; the scale count is `strides.len() + 1`.
    pub strides: Vec<[usize; 3]>,
    pub stages: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Zero the output projections of every residual branch.
    pub zero_init_residual: bool,
    /// Amplitude of the sinusoidal initial value of the positional bias.
    pub pos_scale: f64,
    /// Grid handed to the generator, as `(scale, stage)`.
    pub token_scale: usize,
    pub token_stage: usize,
    pub embedding_pool: PoolKind,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            grid: [32, 32, 32],
            patch: [4, 4, 4],
            c_in: 32,
            strides: vec![[2, 2, 2]; 2],
            stages: 3,
            heads: 4,
            ffn_mult: 2,
            zero_init_residual: false,
            pos_scale: 1.0,
            token_scale: 2,
            token_stage: 2,
            embedding_pool: PoolKind::Mean,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Production geometry: 11 windows over 256³, patch (8,8,4), strides (8,8,1) then (4,4,4), 384 channels.
    pub fn paper_preset() -> Self {
        Self {
            in_channels: 11,
            grid: [256, 256, 256],
            patch: [8, 8, 4],
            c_in: 384,
            strides: vec![[8, 8, 1], [4, 4, 4]],
            stages: 3,
            heads: 8,
            ..Self::default()
        }
    }

    /// Uniform strides for `levels` scales.
    pub fn uniform_strides(s: [usize; 3], levels: usize) -> Vec<[usize; 3]> {
        vec![s; levels.saturating_sub(1)]
    }

    pub fn levels(&self) -> usize {
        self.strides.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < self.levels() {
            return Err(Error::Config(format!(
                "{} stages cannot provide the stage-matched grid of each of {} scales",
                self.stages,
                self.levels()
            )));
        }
        if self.c_in % self.heads != 0 {
            return Err(Error::Config(format!("c_in {} is not divisible by {} heads", self.c_in, self.heads)));
        }
        if !(1..=self.levels()).contains(&self.token_scale) || self.token_stage > self.stages {
            return Err(Error::Config(format!("token grid ({}, {}) does not exist", self.token_scale, self.token_stage)));
        }
        hierarchy_shapes(self.grid, self.patch, &self.strides).map(|_| ())
    }

    pub fn embedding_dim(&self) -> usize {
        self.levels() * self.c_in
    }
}

const AXES: [&str; 3] = ["H", "W", "D"];

/// Spatial extent of every scale: `dims_ℓ = grid / (patch · s_1 ⋯ s_{ℓ−1})`, all divisions exact.
pub fn hierarchy_shapes(grid: [usize; 3], patch: [usize; 3], strides: &[[usize; 3]]) -> Result<Vec<[usize; 3]>> {
    let mut dims = [0; 3];
    for a in 0..3 {
        if patch[a] == 0 || grid[a] % patch[a] != 0 {
            return Err(Error::Shape(format!("axis {} of size {} is not divisible by patch size {}", AXES[a], grid[a], patch[a])));
        }
        dims[a] = grid[a] / patch[a];
    }
    let mut out = vec![dims];
    for (i, s) in strides.iter().enumerate() {
        let prev = *out.last().unwrap();
        let mut next = [0; 3];
        for a in 0..3 {
            if s[a] == 0 || prev[a] % s[a] != 0 {
                return Err(Error::Shape(format!(
                    "scale {}: axis {} of size {} is not divisible by stride {}",
                    i + 2,
                    AXES[a],
                    prev[a],
                    s[a]
                )));
            }
            next[a] = prev[a] / s[a];
        }
        out.push(next);
    }
    Ok(out)
}

/// Row index of voxel/token `(x, y, z)` in a grid of extent `dims`.
pub fn flat_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Fine rows pooled into each coarse cell.
pub fn pooling_groups(fine: [usize; 3], stride: [usize; 3]) -> Vec<Vec<usize>> {
    let coarse = [fine[0] / stride[0], fine[1] / stride[1], fine[2] / stride[2]];
    let mut groups = Vec::with_capacity(coarse.iter().product());
    for cx in 0..coarse[0] {
        for cy in 0..coarse[1] {
            for cz in 0..coarse[2] {
                let mut g = Vec::with_capacity(stride.iter().product());
                for dx in 0..stride[0] {
                    for dy in 0..stride[1] {
                        for dz in 0..stride[2] {
                            g.push(flat_index(fine, cx * stride[0] + dx, cy * stride[1] + dy, cz * stride[2] + dz));
                        }
                    }
                }
                groups.push(g);
            }
        }
    }
    groups
}

/// Coarse cell of each fine row.
pub fn parent_index(fine: [usize; 3], stride: [usize; 3]) -> Vec<usize> {
    let coarse = [fine[0] / stride[0], fine[1] / stride[1], fine[2] / stride[2]];
    let mut out = Vec::with_capacity(fine.iter().product());
    for x in 0..fine[0] {
        for y in 0..fine[1] {
            for z in 0..fine[2] {
                out.push(flat_index(coarse, x / stride[0], y / stride[1], z / stride[2]));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[X·Y·Z × C]`, rows in `x`-major order.
    pub tokens: Tensor,
    pub dims: [usize; 3],
    /// 1-based scale index ℓ.
    pub scale: usize,
    /// Stage index u (0 = before any encoder stage).
    pub stage: usize,
}

impl TokenGrid {
    pub fn channels(&self) -> usize {
        self.tokens.cols
    }

    /// `[C × X × Y × Z]` layout, flattened.
    pub fn to_channel_major(&self) -> Vec<f64> {
        self.tokens.transpose().data
    }

    pub fn from_channel_major(data: &[f64], channels: usize, dims: [usize; 3], scale: usize, stage: usize) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n * channels {
            return Err(Error::Shape(format!("{} values cannot fill {channels} × {dims:?}", data.len())));
        }
        let tokens = Tensor::from_vec(channels, n, data.to_vec()).transpose();
        Ok(Self { tokens, dims, scale, stage })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenHierarchy {
    pub grids: Vec<TokenGrid>,
    pub patch: [usize; 3],
    pub strides: Vec<[usize; 3]>,
}

impl TokenHierarchy {
    pub fn levels(&self) -> usize {
        self.grids.len()
    }
}

/// `h^(ℓ)_u` for every computed `(ℓ, u)`; `grids[ℓ−1][u]`.
#[derive(Clone, Debug)]
pub struct StagedHierarchy {
    pub dims: Vec<[usize; 3]>,
    pub grids: Vec<Vec<Option<Tensor>>>,
}

impl StagedHierarchy {
    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    pub fn get(&self, scale: usize, stage: usize) -> Result<&Tensor> {
        scale
            .checked_sub(1)
            .and_then(|l| self.grids.get(l))
            .and_then(|s| s.get(stage))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Lookup(format!("no token grid h^({scale})_{stage}")))
    }
}

/// Rows of `h^(ℓ)_u` as a `[N × C]` sequence.
pub fn select_tokens(staged: &StagedHierarchy, scale: usize, stage: usize) -> Result<Tensor> {
    staged.get(scale, stage).cloned()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Vec<(usize, usize)>,
}

pub fn pool_tokens(t: &Tensor, kind: PoolKind) -> Vec<f64> {
    let mut out = vec![0.0; t.cols];
    match kind {
        PoolKind::Mean => {
            for r in 0..t.rows {
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= t.rows as f64);
        }
        PoolKind::Max => {
            out.fill(f64::NEG_INFINITY);
            for r in 0..t.rows {
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o = o.max(*v);
                }
            }
        }
    }
    out
}

/// Concatenation of `Pool(h^(ℓ)_ℓ)` over scales, in scale order.
pub fn pool_embedding(staged: &StagedHierarchy) -> Result<MultiScaleEmbedding> {
    pool_embedding_with(staged, PoolKind::Mean)
}

pub fn pool_embedding_with(staged: &StagedHierarchy, kind: PoolKind) -> Result<MultiScaleEmbedding> {
    let mut vector = Vec::new();
    let mut provenance = Vec::new();
    for l in 1..=staged.levels() {
        vector.extend(pool_tokens(staged.get(l, l)?, kind));
        provenance.push((l, l));
    }
    Ok(MultiScaleEmbedding { vector, provenance })
}

/// Non-overlapping mean pooling of the fine grid into `strides.len() + 1` scales.
pub fn build_hierarchy(fine: &TokenGrid, patch: [usize; 3], strides: &[[usize; 3]]) -> Result<TokenHierarchy> {
    let mut grids = vec![fine.clone()];
    for (i, s) in strides.iter().enumerate() {
        let prev = grids.last().unwrap();
        for a in 0..3 {
            if s[a] == 0 || prev.dims[a] % s[a] != 0 {
                return Err(Error::Shape(format!(
                    "scale {}: axis {} of size {} is not divisible by stride {}",
                    i + 2,
                    AXES[a],
                    prev.dims[a],
                    s[a]
                )));
            }
        }
        let groups = pooling_groups(prev.dims, *s);
        let mut t = Tensor::zeros(groups.len(), prev.tokens.cols);
        for (g, members) in groups.iter().enumerate() {
            let row = t.row_mut(g);
            for &m in members {
                for (o, v) in row.iter_mut().zip(prev.tokens.row(m)) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|o| *o /= members.len() as f64);
        }
        let dims = [prev.dims[0] / s[0], prev.dims[1] / s[1], prev.dims[2] / s[2]];
        grids.push(TokenGrid { tokens: t, dims, scale: i + 2, stage: 0 });
    }
    Ok(TokenHierarchy { grids, patch, strides: strides.to_vec() })
}

/// Patch voxels as rows: `[N_patches × channels·p_H·p_W·p_D]`, channel-major within a row.
pub fn patch_matrix(vol: &PhantomVolume, patch: [usize; 3]) -> Result<Tensor> {
    for a in 0..3 {
        if patch[a] == 0 || vol.dims[a] % patch[a] != 0 {
            return Err(Error::Shape(format!(
                "axis {} of size {} is not divisible by patch size {}",
                AXES[a], vol.dims[a], patch[a]
            )));
        }
    }
    let g = [vol.dims[0] / patch[0], vol.dims[1] / patch[1], vol.dims[2] / patch[2]];
    let k = vol.channels * patch.iter().product::<usize>();
    let mut out = Tensor::zeros(g.iter().product(), k);
    let n = vol.voxels();
    for gx in 0..g[0] {
        for gy in 0..g[1] {
            for gz in 0..g[2] {
                let row = out.row_mut(flat_index(g, gx, gy, gz));
                let mut j = 0;
                for c in 0..vol.channels {
                    let base = c * n;
                    for dx in 0..patch[0] {
                        for dy in 0..patch[1] {
                            let x = gx * patch[0] + dx;
                            let y = gy * patch[1] + dy;
                            let start = base + flat_index(vol.dims, x, y, gz * patch[2]);
                            row[j..j + patch[2]].copy_from_slice(&vol.data[start..start + patch[2]]);
                            j += patch[2];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Three-axis sinusoidal code, one axis per channel residue mod 3.
pub fn sinusoidal_code(dims: [usize; 3], channels: usize, amplitude: f64) -> Tensor {
    let mut t = Tensor::zeros(dims.iter().product(), channels);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let pos = [x, y, z];
                let row = t.row_mut(flat_index(dims, x, y, z));
                for (j, v) in row.iter_mut().enumerate() {
                    let a = j % 3;
                    let k = j / 3;
                    let p = (pos[a] as f64 + 0.5) / dims[a] as f64;
                    let w = std::f64::consts::PI * (1 + k / 2) as f64;
                    *v = amplitude * if k % 2 == 0 { (w * p).sin() } else { (w * p).cos() };
                }
            }
        }
    }
    t
}

#[derive(Clone, Debug)]
struct ScaleBlock {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_fine: Option<LayerNorm>,
    from_fine: Option<Linear>,
    ln_coarse: Option<LayerNorm>,
    from_coarse: Option<Linear>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    stem: Linear,
    pos_bias: ParamId,
    /// `blocks[u−1][ℓ−1]`
    blocks: Vec<Vec<ScaleBlock>>,
    dims: Vec<[usize; 3]>,
    groups: Vec<Arc<Vec<Vec<usize>>>>,
    parents: Vec<Arc<Vec<usize>>>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = hierarchy_shapes(cfg.grid, cfg.patch, &cfg.strides)?;
        let mut rng = stream(cfg.seed, streams::INIT);
        let mut store = ParamStore::new();
        let c = cfg.c_in;
        let k = cfg.in_channels * cfg.patch.iter().product::<usize>();
        let stem = Linear::new(&mut store, "stem", k, c, false, &mut rng);
        let pos_bias = store.add("stem.pos_bias", sinusoidal_code(dims[0], c, cfg.pos_scale));
        let levels = dims.len();
        let mut blocks = Vec::new();
        for u in 1..=cfg.stages {
            let mut per_scale = Vec::new();
            for l in 1..=levels {
                let n = format!("stage{u}.scale{l}");
                let out_proj = |store: &mut ParamStore, name: &str, rng: &mut _| {
                    if cfg.zero_init_residual {
                        Linear::zeros(store, name, c, c, true)
                    } else {
                        Linear::new(store, name, c, c, true, rng)
                    }
                };
                let ln_attn = LayerNorm::new(&mut store, &format!("{n}.ln_attn"), c);
                let q = Linear::new(&mut store, &format!("{n}.attn.q"), c, c, true, &mut rng);
                let kk = Linear::new(&mut store, &format!("{n}.attn.k"), c, c, true, &mut rng);
                let v = Linear::new(&mut store, &format!("{n}.attn.v"), c, c, true, &mut rng);
                let o = out_proj(&mut store, &format!("{n}.attn.o"), &mut rng);
                let (ln_fine, from_fine) = if l > 1 {
                    (Some(LayerNorm::new(&mut store, &format!("{n}.ln_fine"), c)), Some(out_proj(&mut store, &format!("{n}.from_fine"), &mut rng)))
                } else {
                    (None, None)
                };
                let (ln_coarse, from_coarse) = if l < levels {
                    (
                        Some(LayerNorm::new(&mut store, &format!("{n}.ln_coarse"), c)),
                        Some(out_proj(&mut store, &format!("{n}.from_coarse"), &mut rng)),
                    )
                } else {
                    (None, None)
                };
                let ln_ffn = LayerNorm::new(&mut store, &format!("{n}.ln_ffn"), c);
                let ffn = FeedForward::new(&mut store, &format!("{n}.ffn"), c, c * cfg.ffn_mult, cfg.zero_init_residual, &mut rng);
                per_scale.push(ScaleBlock { ln_attn, q, k: kk, v, o, ln_fine, from_fine, ln_coarse, from_coarse, ln_ffn, ffn });
            }
            blocks.push(per_scale);
        }
        let groups = (0..levels - 1).map(|i| Arc::new(pooling_groups(dims[i], cfg.strides[i]))).collect();
        let parents = (0..levels - 1).map(|i| Arc::new(parent_index(dims[i], cfg.strides[i]))).collect();
        Ok(Self { cfg, store, stem, pos_bias, blocks, dims, groups, parents })
    }

    pub fn stem_weight(&self) -> ParamId {
        self.stem.w
    }

    pub fn dims(&self) -> &[[usize; 3]] {
        &self.dims
    }

    /// Stem: linear map of each patch plus a learned per-position bias.
    pub fn patchify_graph(&self, g: &mut Graph, patches: Var) -> Var {
        let t = self.stem.forward(g, &self.store, patches);
        let b = g.param(&self.store, self.pos_bias);
        g.add(t, b)
    }

    pub fn hierarchy_graph(&self, g: &mut Graph, fine: Var) -> Vec<Var> {
        let mut out = vec![fine];
        for groups in &self.groups {
            let prev = *out.last().unwrap();
            out.push(g.segment_mean(prev, groups.clone()));
        }
        out
    }

    /// Runs the encoder stages. Scale `ℓ` is computed up to stage `limits[ℓ−1]`;
    /// the neighbours it reads must be available one stage earlier.
    pub fn encode_graph(&self, g: &mut Graph, levels: &[Var], limits: &[usize]) -> Vec<Vec<Option<Var>>> {
        let nl = levels.len();
        let mut h: Vec<Vec<Option<Var>>> = levels.iter().map(|v| vec![Some(*v)]).collect();
        for u in 1..=self.cfg.stages {
            for l in 0..nl {
                if u > limits[l] {
                    h[l].push(None);
                    continue;
                }
                let blk = &self.blocks[u - 1][l];
                let x = h[l][u - 1].expect("encoder input computed");
                let s = &self.store;
                let xn = blk.ln_attn.forward(g, s, x);
                let q = blk.q.forward(g, s, xn);
                let k = blk.k.forward(g, s, xn);
                let v = blk.v.forward(g, s, xn);
                let a = attention(g, q, k, v, self.cfg.heads, None);
                let a = blk.o.forward(g, s, a);
                let mut y = g.add(x, a);
                if let (Some(ln), Some(lin)) = (&blk.ln_fine, &blk.from_fine) {
                    let fine = h[l - 1][u - 1].expect("finer scale computed one stage earlier");
                    let pooled = g.segment_mean(fine, self.groups[l - 1].clone());
                    let pn = ln.forward(g, s, pooled);
                    let e = lin.forward(g, s, pn);
                    y = g.add(y, e);
                }
                if let (Some(ln), Some(lin)) = (&blk.ln_coarse, &blk.from_coarse) {
                    let coarse = h[l + 1][u - 1].expect("coarser scale computed one stage earlier");
                    let up = g.gather_rows(coarse, self.parents[l].clone());
                    let un = ln.forward(g, s, up);
                    let e = lin.forward(g, s, un);
                    y = g.add(y, e);
                }
                let yn = blk.ln_ffn.forward(g, s, y);
                let f = blk.ffn.forward(g, s, yn);
                h[l].push(Some(g.add(y, f)));
            }
        }
        h
    }

    /// Stage limits that still produce every `h^(ℓ)_ℓ` and the generator grid.
    pub fn minimal_limits(&self) -> Vec<usize> {
        (1..=self.dims.len())
            .map(|l| if l == self.cfg.token_scale { l.max(self.cfg.token_stage) } else { l })
            .map(|u| u.min(self.cfg.stages))
            .collect()
    }

    pub fn patchify(&self, vol: &PhantomVolume) -> Result<TokenGrid> {
        self.check_volume(vol)?;
        let p = patch_matrix(vol, self.cfg.patch)?;
        let mut g = Graph::frozen();
        let pv = g.constant(p);
        let t = self.patchify_graph(&mut g, pv);
        Ok(TokenGrid { tokens: g.value(t).clone(), dims: self.dims[0], scale: 1, stage: 0 })
    }

    fn check_volume(&self, vol: &PhantomVolume) -> Result<()> {
        if vol.channels != self.cfg.in_channels || vol.dims != self.cfg.grid {
            return Err(Error::Shape(format!(
                "volume {}×{:?} does not match backbone input {}×{:?}",
                vol.channels, vol.dims, self.cfg.in_channels, self.cfg.grid
            )));
        }
        Ok(())
    }

    /// Runs every stage on every scale.
    pub fn encode(&self, hier: &TokenHierarchy) -> Result<StagedHierarchy> {
        let limits = vec![self.cfg.stages; self.dims.len()];
        self.encode_limited(hier, &limits)
    }

    pub fn encode_limited(&self, hier: &TokenHierarchy, limits: &[usize]) -> Result<StagedHierarchy> {
        if hier.levels() != self.dims.len() {
            return Err(Error::Shape(format!("hierarchy has {} scales, encoder expects {}", hier.levels(), self.dims.len())));
        }
        let mut g = Graph::frozen();
        let levels: Vec<Var> = hier.grids.iter().map(|t| g.constant(t.tokens.clone())).collect();
        let h = self.encode_graph(&mut g, &levels, limits);
        Ok(StagedHierarchy {
            dims: self.dims.clone(),
            grids: h.into_iter().map(|s| s.into_iter().map(|v| v.map(|v| g.value(v).clone())).collect()).collect(),
        })
    }

    /// Frozen features of one volume: the generator token sequence and the probe embedding.
    pub fn features(&self, vol: &PhantomVolume) -> Result<(Tensor, Vec<f64>)> {
        let fine = self.patchify(vol)?;
        let hier = build_hierarchy(&fine, self.cfg.patch, &self.cfg.strides)?;
        let staged = self.encode_limited(&hier, &self.minimal_limits())?;
        let tokens = select_tokens(&staged, self.cfg.token_scale, self.cfg.token_stage)?;
        let emb = pool_embedding_with(&staged, self.cfg.embedding_pool)?;
        Ok((tokens, emb.vector))
    }

    /// Checkpoint with the config echoed in the header; weights stored as f32.
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.cfg });
        checkpoint::write_store(path, CHECKPOINT_KIND, &meta, &self.store, DType::F32)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("{} holds a {:?} checkpoint, not a backbone", path.display(), c.kind)));
        }
        let cfg: BackboneConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut bb = Backbone::new(cfg)?;
        bb.store.load_from(&c.into_store())?;
        Ok(bb)
    }

    /// Differentiable end-to-end map from patch rows to the mean-pooled embedding.
    pub fn embedding_graph(&self, g: &mut Graph, patches: Var) -> Var {
        self.embedding_graph_limited(g, patches, &self.minimal_limits())
    }

    fn embedding_graph_limited(&self, g: &mut Graph, patches: Var, limits: &[usize]) -> Var {
        let fine = self.patchify_graph(g, patches);
        let levels = self.hierarchy_graph(g, fine);
        let h = self.encode_graph(g, &levels, limits);
        let pooled: Vec<Var> = (0..levels.len()).map(|l| g.mean_rows(h[l][l + 1].unwrap())).collect();
        g.concat_cols(&pooled)
    }

    /// Supervised warm-up standing in for a pretrained foundation encoder: a
    /// temporary linear head on the mean-pooled embedding predicts presence,
    /// laterality and lobe labels of a dedicated phantom set under weighted BCE.
    /// The head is discarded afterwards.
    pub fn pretrain(&mut self, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InsufficientData("backbone pretraining set is empty".into()));
        }
        let sets = [QuestionSet::toy_qs1(), QuestionSet::full(QsId::Qs2), QuestionSet::full(QsId::Qs3)];
        let targets_of = |d: &Dataset| -> Result<Vec<Vec<f64>>> {
            d.samples
                .iter()
                .map(|s| -> Result<Vec<f64>> {
                    let mut t = Vec::new();
                    for qs in &sets {
                        t.extend(qs.project(s.gt.labels(qs.id))?.values.iter().map(|v| *v as f64));
                    }
                    Ok(t)
                })
                .collect()
        };
        let targets = targets_of(data)?;
        let n_out = targets[0].len();
        let pos: Vec<usize> = (0..n_out).map(|c| targets.iter().filter(|t| t[c] > 0.5).count()).collect();
        let n = targets.len();
        let pos_weight: Vec<f64> = pos.iter().map(|p| if *p == 0 { 1.0 } else { (n - p) as f64 / *p as f64 }).collect();
        let include: Vec<bool> = pos.iter().map(|p| *p > 0 && *p < n).collect();
        let (pos_weight, include) = (Arc::new(pos_weight), Arc::new(include));

        let mut work = self.clone();
        let mut rng = stream(cfg.seed, streams::INIT);
        let head = Linear::new(&mut work.store, "pretrain_head", self.cfg.embedding_dim(), n_out, true, &mut rng);
        let limits = self.minimal_limits();
        let mut opt = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: Some(1.0), ..Default::default() });
        let mut losses = Vec::new();
        let bs = cfg.batch_size.max(1);
        let total_steps = (cfg.epochs * n.div_ceil(bs)).max(1);
        let mut epoch_data = None;
        for epoch in 0..cfg.epochs {
            if cfg.resample && epoch > 0 {
                let d = make_dataset(n, derive(data.seed, epoch as u64), &data.config)?;
                let t = targets_of(&d)?;
                epoch_data = Some((d, t));
            }
            let (data, targets) = match &epoch_data {
                Some((d, t)) => (d, t),
                None => (data, &targets),
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(derive(cfg.seed, epoch as u64), streams::SHUFFLE));
            for batch in order.chunks(bs) {
                // Cosine decay over the whole run.
                let t = losses.len() as f64 / total_steps as f64;
                opt.cfg.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                let mut grads = Vec::new();
                let mut total = 0.0;
                for &i in batch {
                    let vol = data.volume(i)?;
                    work.check_volume(&vol)?;
                    let mut g = Graph::new();
                    let p = g.constant(patch_matrix(&vol, self.cfg.patch)?);
                    let emb = work.embedding_graph_limited(&mut g, p, &limits);
                    let z = head.forward(&mut g, &work.store, emb);
                    let y = Arc::new(Tensor::row_vector(targets[i].clone()));
                    let loss = g.weighted_bce(z, y, pos_weight.clone(), include.clone());
                    total += g.value(loss).item();
                    g.backward(loss);
                    accumulate(&mut grads, g.param_grads());
                }
                let mean = total / batch.len() as f64;
                if !mean.is_finite() {
                    return Err(Error::Divergence { step: losses.len(), detail: format!("backbone pretraining loss {mean}") });
                }
                scale_grads(&mut grads, 1.0 / batch.len() as f64);
                opt.step(&mut work.store, &grads);
                losses.push(mean);
            }
            log::info!("backbone pretraining epoch {epoch}: loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        self.store.load_from(&work.store)?;
        Ok(losses)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Draw a fresh phantom set of the same size and config for every epoch after the first.
    pub resample: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 16, lr: 2e-3, resample: true, seed: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig { grid: [8, 8, 8], patch: [2, 2, 2], c_in: 8, heads: 2, ..Default::default() }
    }

    #[test]
    fn toy_and_paper_shapes() {
        let toy = BackboneConfig::default();
        assert_eq!(hierarchy_shapes(toy.grid, toy.patch, &toy.strides).unwrap(), vec![[8, 8, 8], [4, 4, 4], [2, 2, 2]]);
        let p = BackboneConfig::paper_preset();
        assert_eq!(hierarchy_shapes(p.grid, p.patch, &p.strides).unwrap(), vec![[32, 32, 64], [4, 4, 64], [1, 1, 16]]);
        assert_eq!(p.embedding_dim(), 1152);
        let d = hierarchy_shapes(p.grid, p.patch, &p.strides).unwrap()[1];
        assert_eq!(d.iter().product::<usize>(), 1024);
    }

    #[test]
    fn shape_errors_name_axis_and_scale() {
        let e = hierarchy_shapes([30, 32, 32], [4, 4, 4], &[]).unwrap_err().to_string();
        assert!(e.contains("axis H"), "{e}");
        let e = hierarchy_shapes([32, 32, 24], [4, 4, 4], &[[2, 2, 2], [2, 2, 2]]).unwrap_err().to_string();
        assert!(e.contains("scale 3") && e.contains("axis D"), "{e}");
    }

    #[test]
    fn stage_count_must_cover_scales() {
        let cfg = BackboneConfig { stages: 2, ..Default::default() };
        assert!(matches!(Backbone::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn flattening_order_is_x_major() {
        assert_eq!(flat_index([2, 2, 2], 0, 0, 1), 1);
        assert_eq!(flat_index([2, 2, 2], 0, 1, 0), 2);
        assert_eq!(flat_index([2, 2, 2], 1, 0, 0), 4);
    }

    #[test]
    fn zero_residual_encoder_is_identity() {
        let bb = Backbone::new(BackboneConfig { zero_init_residual: true, ..small_cfg() }).unwrap();
        let mut rng = stream(1, 0);
        let fine = TokenGrid { tokens: Tensor::randn(64, 8, 1.0, &mut rng), dims: [4, 4, 4], scale: 1, stage: 0 };
        let hier = build_hierarchy(&fine, [2, 2, 2], &bb.cfg.strides).unwrap();
        let staged = bb.encode(&hier).unwrap();
        for l in 1..=3 {
            for u in 0..=3 {
                assert_eq!(staged.get(l, u).unwrap(), &hier.grids[l - 1].tokens);
            }
        }
    }

    fn with_store(bb: &Backbone, s: &ParamStore) -> Backbone {
        let mut b = bb.clone();
        b.store = s.clone();
        b
    }

    fn ids_with_prefix(bb: &Backbone, prefix: &str) -> Vec<ParamId> {
        bb.store.ids().filter(|id| bb.store.name(*id).starts_with(prefix)).collect()
    }

    #[test]
    fn stem_gradients_match_finite_differences() {
        let bb = Backbone::new(small_cfg()).unwrap();
        let mut rng = stream(3, 0);
        let k = bb.cfg.in_channels * 8;
        let patches = Tensor::randn(64, k, 1.0, &mut rng);
        let w = Arc::new(Tensor::randn(64, 8, 1.0, &mut rng));
        let ids = ids_with_prefix(&bb, "stem");
        assert_eq!(ids.len(), 2);
        let res = gradcheck::check_params(&bb.store, &ids, 1e-5, 40, 1e-6, |g, s| {
            let b = with_store(&bb, s);
            let x = g.constant(patches.clone());
            let t = b.patchify_graph(g, x);
            g.dot_const(t, w.clone())
        });
        assert!(res.passes(1e-3), "{res:?}");
    }

    #[test]
    fn encoder_stage_gradients_match_finite_differences() {
        let bb = Backbone::new(small_cfg()).unwrap();
        let mut rng = stream(4, 0);
        let k = bb.cfg.in_channels * 8;
        let patches = Tensor::randn(64, k, 1.0, &mut rng);
        let w = Arc::new(Tensor::randn(1, 8 * 3, 1.0, &mut rng));
        let ids = ids_with_prefix(&bb, "stage1.");
        assert!(!ids.is_empty());
        let res = gradcheck::check_params(&bb.store, &ids, 1e-5, 6, 1e-6, |g, s| {
            let b = with_store(&bb, s);
            let x = g.constant(patches.clone());
            let e = b.embedding_graph(g, x);
            g.dot_const(e, w.clone())
        });
        assert!(res.passes(1e-3), "{res:?}");
    }

    #[test]
    fn zero_volume_and_bias_give_zero_tokens() {
        let mut bb = Backbone::new(small_cfg()).unwrap();
        let id = bb.pos_bias;
        bb.store.set(id, Tensor::zeros(64, 8));
        let vol = PhantomVolume { channels: 3, dims: [8, 8, 8], data: vec![0.0; 3 * 512], spacing: 1.0, channel_descriptors: vec![] };
        let t = bb.patchify(&vol).unwrap();
        assert!(t.tokens.data.iter().all(|v| *v == 0.0));
        assert_eq!(t.dims, [4, 4, 4]);
    }

    #[test]
    fn resampling_changes_only_later_epochs() {
        let data = make_dataset(4, 11, &crate::synthdata::DatasetConfig::default()).unwrap();
        let cfg = BackboneConfig { c_in: 8, heads: 2, ..Default::default() };
        let run = |resample| {
            let mut bb = Backbone::new(cfg.clone()).unwrap();
            bb.pretrain(&data, &PretrainConfig { epochs: 2, batch_size: 2, lr: 1e-3, resample, seed: 1 }).unwrap()
        };
        let (fixed, fresh) = (run(false), run(true));
        assert_eq!(fresh, run(true));
        assert_eq!(fixed[..2], fresh[..2]);
        assert_ne!(fixed[2..], fresh[2..]);
    }
}
