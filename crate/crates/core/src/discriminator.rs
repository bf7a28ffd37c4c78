//! Linear multi-label probes on frozen multi-scale embeddings, and a noisy cue
//! source that stands in for an external classifier of chosen quality.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalproto::metrics::{metrics_from_labels, MetricsReport};
use crate::nn::checkpoint::{self, DType};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::rng::{stream, streams};

pub use crate::questions::{LabelVector, QsId, QuestionSet};

#[derive(Clone, Debug, PartialEq)]
pub struct PosWeights {
    pub weights: Vec<f64>,
    /// Classes without positives: weight 1 and no loss contribution.
    pub excluded: Vec<bool>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// `w_c = N_neg,c / N_pos,c` over the training labels.
pub fn compute_pos_weights(labels: &[LabelVector]) -> Result<PosWeights> {
    let c = labels.first().map(|l| l.len()).ok_or_else(|| Error::InsufficientData("no labels".into()))?;
    let mut pos = vec![0usize; c];
    for l in labels {
        if l.len() != c {
            return Err(Error::Shape(format!("label vectors of length {} and {c} mixed", l.len())));
        }
        for (p, v) in pos.iter_mut().zip(&l.values) {
            *p += usize::from(*v != 0);
        }
    }
    let neg: Vec<usize> = pos.iter().map(|p| labels.len() - p).collect();
    let excluded: Vec<bool> = pos.iter().map(|p| *p == 0).collect();
    let weights = pos.iter().zip(&neg).map(|(p, n)| if *p == 0 { 1.0 } else { *n as f64 / *p as f64 }).collect();
    Ok(PosWeights { weights, excluded, pos, neg })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Train on per-feature standardized inputs and fold the scaling back into the weights.
    pub standardize: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 1e-2, epochs: 600, batch_size: None, standardize: true, threshold: 0.5, seed: 0 }
    }
}

impl ProbeConfig {
    /// Optimiser schedule of the production setting.
    pub fn paper_preset() -> Self {
        Self { lr: 1e-3, epochs: 1000, batch_size: Some(8192), ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub qs: QuestionSet,
    /// `[C × E]`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl LinearProbe {
    pub fn embedding_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({ "question_set": self.qs, "thresholds": self.thresholds });
        let bias = Tensor::row_vector(self.bias.clone());
        checkpoint::write(path, "linear_probe", &meta, &[("weights", &self.weights), ("bias", &bias)], DType::F64)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != "linear_probe" {
            return Err(Error::Format(format!("{} holds a {:?}, not a linear probe", path.display(), c.kind)));
        }
        let qs: QuestionSet = serde_json::from_value(c.meta["question_set"].clone())?;
        let thresholds: Vec<f64> = serde_json::from_value(c.meta["thresholds"].clone())?;
        Ok(Self { qs, weights: c.tensor("weights")?.clone(), bias: c.tensor("bias")?.data.clone(), thresholds })
    }
}

#[derive(Clone, Debug)]
pub struct ProbeTraining {
    pub probe: LinearProbe,
    pub losses: Vec<f64>,
    pub pos_weights: PosWeights,
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let e = rows.first().map(Vec::len).unwrap_or(0);
    let mut t = Tensor::zeros(rows.len(), e);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != e {
            return Err(Error::Shape(format!("embedding {i} has length {}, expected {e}", r.len())));
        }
        t.row_mut(i).copy_from_slice(r);
    }
    Ok(t)
}

/// Minimises the class-weighted BCE with Adam.
pub fn train_probe(embeddings: &[Vec<f64>], labels: &[LabelVector], qs: &QuestionSet, opt: &ProbeConfig) -> Result<ProbeTraining> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::Shape(format!("{} embeddings vs {} label vectors", embeddings.len(), labels.len())));
    }
    for l in labels {
        l.check_arity(qs)?;
    }
    let mut x = stack(embeddings)?;
    let (n, e) = x.shape();
    let c = qs.arity();
    let (mut mean, mut scale) = (vec![0.0; e], vec![1.0; e]);
    if opt.standardize {
        for j in 0..e {
            let m = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x.at(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            scale[j] = if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 };
        }
        for i in 0..n {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * scale[j];
            }
        }
    }
    let pw = compute_pos_weights(labels)?;
    let mut y = Tensor::zeros(n, c);
    for (i, l) in labels.iter().enumerate() {
        for (k, v) in l.values.iter().enumerate() {
            *y.at_mut(i, k) = *v as f64;
        }
    }
    let weights = Arc::new(pw.weights.clone());
    let include = Arc::new(pw.excluded.iter().map(|x| !x).collect::<Vec<_>>());
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(e, c));
    let b = store.add("b", Tensor::zeros(1, c));
    let mut adam = Adam::new(AdamConfig { lr: opt.lr, ..Default::default() });
    let batch = opt.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(opt.seed, streams::SHUFFLE);
    let mut losses = Vec::with_capacity(opt.epochs);
    let mut step = 0;
    for _ in 0..opt.epochs {
        if batch < n {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let (xb, yb) = if batch == n {
                (x.clone(), y.clone())
            } else {
                let mut xb = Tensor::zeros(chunk.len(), e);
                let mut yb = Tensor::zeros(chunk.len(), c);
                for (r, &i) in chunk.iter().enumerate() {
                    xb.row_mut(r).copy_from_slice(x.row(i));
                    yb.row_mut(r).copy_from_slice(y.row(i));
                }
                (xb, yb)
            };
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let wv = g.param(&store, w);
            let bv = g.param(&store, b);
            let z = g.matmul(xv, wv);
            let z = g.add_row(z, bv);
            let loss = g.weighted_bce(z, Arc::new(yb), weights.clone(), include.clone());
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence { step, detail: format!("probe loss {lv}") });
            }
            g.backward(loss);
            let grads = g.param_grads();
            adam.step(&mut store, &grads);
            epoch_loss += lv * chunk.len() as f64 / n as f64;
            step += 1;
        }
        losses.push(epoch_loss);
    }
    // Fold the standardisation back: z = Σ_j W_jk (x_j − μ_j) s_j + b_k.
    let wt = store.get(w);
    let mut weights_ce = Tensor::zeros(c, e);
    let mut bias = store.get(b).data.clone();
    for k in 0..c {
        for j in 0..e {
            let v = wt.at(j, k) * scale[j];
            *weights_ce.at_mut(k, j) = v;
            bias[k] -= v * mean[j];
        }
    }
    let probe = LinearProbe { qs: qs.clone(), weights: weights_ce, bias, thresholds: vec![opt.threshold; c] };
    Ok(ProbeTraining { probe, losses, pos_weights: pw })
}

/// Scores `σ(Wx + b)` and labels `score ≥ threshold`.
pub fn predict(probe: &LinearProbe, emb: &[f64]) -> Result<(LabelVector, Vec<f64>)> {
    if emb.len() != probe.embedding_dim() {
        return Err(Error::Shape(format!("embedding of length {} for a probe trained on {}", emb.len(), probe.embedding_dim())));
    }
    let scores: Vec<f64> = (0..probe.weights.rows)
        .map(|k| {
            let z = probe.weights.row(k).iter().zip(emb).map(|(w, x)| w * x).sum::<f64>() + probe.bias[k];
            crate::nn::tensor::sigmoid(z)
        })
        .collect();
    let values = scores.iter().zip(&probe.thresholds).map(|(s, t)| u8::from(*s >= *t)).collect();
    Ok((LabelVector { qs: probe.qs.id, values }, scores))
}

/// Per-question precision/recall/F1 and AUROC of a probe on held-out embeddings.
pub fn evaluate_probe(probe: &LinearProbe, embeddings: &[Vec<f64>], labels: &[LabelVector]) -> Result<MetricsReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::Alignment(format!("{} embeddings vs {} label vectors", embeddings.len(), labels.len())));
    }
    let mut preds = Vec::with_capacity(labels.len());
    let mut scores = Vec::with_capacity(labels.len());
    for e in embeddings {
        let (p, s) = predict(probe, e)?;
        preds.push(p);
        scores.push(s);
    }
    metrics_from_labels(&probe.qs, &preds, labels, Some(&scores))
}

/// Flips each entry independently with its class rate.
pub fn simulate_cue_source(gt: &LabelVector, flip_rates: &[f64], seed: u64) -> Result<LabelVector> {
    if flip_rates.len() != gt.len() {
        return Err(Error::Shape(format!("{} flip rates for {} labels", flip_rates.len(), gt.len())));
    }
    if let Some(r) = flip_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("flip rate {r} outside [0, 1]")));
    }
    let mut rng = stream(seed, streams::CUE_NOISE);
    let values = gt
        .values
        .iter()
        .zip(flip_rates)
        .map(|(v, r)| {
            let flip = rng.random::<f64>() < *r;
            if flip {
                1 - v.min(&1)
            } else {
                *v
            }
        })
        .collect();
    Ok(LabelVector { qs: gt.qs, values })
}
