//! Decoder pretraining and the two generator training stages.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Adapters;
use super::prompt::{assemble_ids, PromptSequence};
use super::vocab::QUERY;
use super::Generator;
use crate::cueprompt::{prompt_dropout, template, CueEntity, CueSource};
use crate::error::{Error, Result};
use crate::nn::params::{accumulate, scale_grads};
use crate::nn::{Adam, AdamConfig, Graph, ParamId, Tensor};
use crate::rng::{derive, stream, streams};

/// One training item: frozen visual tokens, report ids `BOS … EOS`, and the
/// undropped cue entities used in stage 2.
#[derive(Clone, Debug)]
pub struct GenSample {
    pub id: String,
    pub visual: Option<Arc<Tensor>>,
    pub report_ids: Vec<usize>,
    pub cues: Vec<CueEntity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 16, lr: 1e-3, clip_norm: Some(1.0), seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    /// Mean loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Checksum of the parameters the stage must leave untouched.
    pub frozen_checksum: String,
}

/// Seed of the dropout draw for sample `idx` in `epoch`.
pub fn dropout_seed(run_seed: u64, epoch: usize, idx: usize) -> u64 {
    derive(derive(run_seed, epoch as u64), idx as u64)
}

struct Example {
    visual: Option<Arc<Tensor>>,
    ids: Vec<usize>,
    logits_from: usize,
}

fn example_loss(gen: &Generator, g: &mut Graph, ex: &Example, adapters: Adapters) -> crate::nn::Var {
    let s = &gen.store;
    let emb = gen.decoder.embed_ids(g, s, &ex.ids);
    let (x, m) = match &ex.visual {
        Some(v) => {
            let v = g.constant(v.as_ref().clone());
            let img = gen.projector.forward(g, s, v);
            let m = g.value(img).rows;
            (g.concat_rows(&[img, emb]), m)
        }
        None => (emb, 0),
    };
    let t = m + ex.ids.len();
    let targets: Vec<Option<usize>> = (ex.logits_from..t).map(|p| ex.ids.get(p + 1 - m).copied()).collect();
    let logits = gen.decoder.forward(g, s, x, ex.logits_from, adapters);
    g.cross_entropy(logits, Arc::new(targets))
}

/// Shuffled minibatch Adam over `n` examples; returns per-step mean losses.
fn train_loop<F>(gen: &mut Generator, n: usize, cfg: &TrainConfig, trainable: &[ParamId], adapters: Adapters, mut example: F) -> Result<Vec<f64>>
where
    F: FnMut(&Generator, usize, usize) -> Result<Example>,
{
    if n == 0 {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let set = Generator::trainable(trainable);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..Default::default() });
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(derive(cfg.seed, epoch as u64), streams::SHUFFLE));
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Vec::new();
            let mut total = 0.0;
            for &idx in batch {
                let ex = example(gen, epoch, idx)?;
                let mut g = Graph::with_trainable(set.clone());
                let loss = example_loss(gen, &mut g, &ex, adapters);
                total += g.value(loss).item();
                g.backward(loss);
                accumulate(&mut grads, g.param_grads());
            }
            let mean = total / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence { step: losses.len(), detail: format!("loss {mean}") });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut gen.store, &grads);
            losses.push(mean);
        }
    }
    Ok(losses)
}

fn check_report_ids(ids: &[usize]) -> Result<()> {
    if ids.len() < 2 || ids[0] != super::vocab::BOS || ids[ids.len() - 1] != super::vocab::EOS {
        return Err(Error::Config("report ids must be BOS … EOS".into()));
    }
    Ok(())
}

/// Mean next-token cross-entropy of `reports` under the decoder alone.
pub fn report_loss(gen: &Generator, reports: &[Vec<usize>]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("no reports to score".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in reports {
        check_report_ids(r)?;
        let mut g = Graph::frozen();
        let ex = Example { visual: None, ids: r.clone(), logits_from: 0 };
        let loss = example_loss(gen, &mut g, &ex, Adapters::Off);
        total += g.value(loss).item() * (r.len() - 1) as f64;
        count += r.len() - 1;
    }
    Ok(total / count as f64)
}

/// Next-token training of the decoder on report text alone. Fails when the
/// held-out perplexity stays above `max_perplexity`.
pub fn pretrain_decoder(
    gen: &mut Generator,
    corpus: &[Vec<usize>],
    heldout: &[Vec<usize>],
    cfg: &TrainConfig,
    max_perplexity: f64,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("pretraining corpus is empty".into()));
    }
    for r in corpus {
        check_report_ids(r)?;
    }
    let trainable = gen.decoder_base_ids();
    let losses = train_loop(gen, corpus.len(), cfg, &trainable, Adapters::Off, |_, _, idx| {
        Ok(Example { visual: None, ids: corpus[idx].clone(), logits_from: 0 })
    })?;
    let eval = if heldout.is_empty() { corpus } else { heldout };
    let perplexity = report_loss(gen, eval)?.exp();
    if !perplexity.is_finite() || perplexity > max_perplexity {
        return Err(Error::Invariant(format!("held-out perplexity {perplexity:.3} exceeds the threshold {max_perplexity}")));
    }
    gen.pretrain_perplexity = Some(perplexity);
    Ok(PretrainReport { losses, perplexity })
}

fn visual_of(gen: &Generator, s: &GenSample) -> Result<Option<Arc<Tensor>>> {
    if gen.cfg.no_image {
        return Ok(None);
    }
    let v = s.visual.clone().ok_or_else(|| Error::Config(format!("sample {} has no visual tokens", s.id)))?;
    if v.cols != gen.cfg.c_in {
        return Err(Error::Shape(format!("sample {} visual width {} vs projector {}", s.id, v.cols, gen.cfg.c_in)));
    }
    Ok(Some(v))
}

fn frozen_guard(gen: &Generator, frozen: &[ParamId], before: &str, stage: &str) -> Result<String> {
    let after = gen.checksum(frozen);
    if after != before {
        return Err(Error::FreezeViolation(format!("{stage} changed frozen parameters ({before} -> {after})")));
    }
    Ok(after)
}

/// Stage 1: aligns the projector with the frozen decoder on `[img ; query]` prompts.
pub fn train_stage1(gen: &mut Generator, samples: &[GenSample], cfg: &TrainConfig) -> Result<StageReport> {
    if gen.pretrain_perplexity.is_none() {
        return Err(Error::Config("stage 1 needs a pretrained decoder".into()));
    }
    let query = gen.vocab.encode(QUERY)?;
    let frozen: Vec<ParamId> = gen.decoder_base_ids().into_iter().chain(gen.adapter_ids()).collect();
    let before = gen.checksum(&frozen);
    let trainable = gen.projector_ids();
    let m = gen.cfg.prompt_image_tokens();
    let losses = train_loop(gen, samples.len(), cfg, &trainable, Adapters::Off, |gen, _, idx| {
        let s = &samples[idx];
        check_report_ids(&s.report_ids)?;
        let prompt = assemble_ids(m, Vec::new(), query.clone());
        let mut ids = prompt.text_ids();
        ids.extend_from_slice(&s.report_ids);
        Ok(Example { visual: visual_of(gen, s)?, ids, logits_from: prompt.len() })
    })?;
    let frozen_checksum = frozen_guard(gen, &frozen, &before, "stage 1")?;
    Ok(StageReport { losses, frozen_checksum })
}

/// Stage-2 prompt of one sample after dropping its cue entities with `seed`.
pub(crate) fn stage2_prompt(gen: &Generator, cues: &[CueEntity], p: f64, seed: u64, source: CueSource, query: &[usize]) -> Result<PromptSequence> {
    let kept = prompt_dropout(cues, p, seed)?;
    let cue = template(&kept, source);
    Ok(assemble_ids(gen.cfg.prompt_image_tokens(), gen.vocab.encode(&cue.text)?, query.to_vec()))
}

/// Stage 2: projector and adapters on full `[img ; cue ; query]` prompts, with
/// each sample's cue entities independently dropped at rate `p`, redrawn every epoch.
pub fn train_stage2(gen: &mut Generator, samples: &[GenSample], p: f64, source: CueSource, cfg: &TrainConfig) -> Result<StageReport> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1]")));
    }
    let query = gen.vocab.encode(QUERY)?;
    let frozen = gen.decoder_base_ids();
    let before = gen.checksum(&frozen);
    let trainable: Vec<ParamId> = gen.projector_ids().into_iter().chain(gen.adapter_ids()).collect();
    gen.adapters = Adapters::On;
    let losses = train_loop(gen, samples.len(), cfg, &trainable, Adapters::On, |gen, epoch, idx| {
        let s = &samples[idx];
        check_report_ids(&s.report_ids)?;
        let prompt = stage2_prompt(gen, &s.cues, p, dropout_seed(cfg.seed, epoch, idx), source, &query)?;
        let mut ids = prompt.text_ids();
        ids.extend_from_slice(&s.report_ids);
        Ok(Example { visual: visual_of(gen, s)?, ids, logits_from: prompt.len() })
    })?;
    let frozen_checksum = frozen_guard(gen, &frozen, &before, "stage 2")?;
    Ok(StageReport { losses, frozen_checksum })
}
