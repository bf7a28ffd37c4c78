use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Ids are insertion indices and stay stable for the
/// lifetime of the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(t));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(self.values[id.0].shape(), t.shape(), "set() shape mismatch for {}", self.names[id.0]);
        self.values[id.0] = Arc::new(t);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of the selected parameters.
    pub fn checksum_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let t = &self.values[id.0];
            h.update(self.names[id.0].as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_of(self.ids())
    }

    /// Copies values by name from `other` (shapes must agree).
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = *other.index.get(name).ok_or_else(|| Error::Lookup(format!("checkpoint lacks parameter {name}")))?;
            if other.values[j].shape() != self.values[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    other.values[j].shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = other.values[j].clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must be sorted by id for reproducible clipping sums.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let mut clip = 1.0;
        if let Some(max) = self.cfg.clip_norm {
            let norm = grads.iter().flat_map(|(_, g)| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                clip = max / norm;
            }
        }
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads {
            let n = g.len();
            let m = self.m.entry(*id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(*id).or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(*id);
            for k in 0..n {
                let gk = g.data[k] * clip;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Sums per-sample gradient lists (each sorted by id) in a fixed order.
pub fn accumulate(into: &mut Vec<(ParamId, Tensor)>, grads: Vec<(ParamId, Tensor)>) {
    if into.is_empty() {
        *into = grads;
        return;
    }
    let mut it = grads.into_iter().peekable();
    for (id, acc) in into.iter_mut() {
        if let Some((gid, _)) = it.peek() {
            if gid == id {
                let (_, g) = it.next().unwrap();
                acc.add_assign(&g);
            }
        }
    }
    // Parameters that appeared only in later samples.
    let rest: Vec<_> = it.collect();
    if !rest.is_empty() {
        into.extend(rest);
        into.sort_by_key(|(id, _)| *id);
    }
}

pub fn scale_grads(grads: &mut [(ParamId, Tensor)], s: f64) {
    for (_, g) in grads.iter_mut() {
        for v in g.data.iter_mut() {
            *v *= s;
        }
    }
}
