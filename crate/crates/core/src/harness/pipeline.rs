//! In-memory building blocks shared by the CLI commands and the acceptance suite.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cueprompt::{labels_to_entities, template, CueEntity, CueSource};
use crate::discriminator::{predict, simulate_cue_source, train_probe, LinearProbe, ProbeConfig, ProbeTraining};
use crate::error::{Error, Result};
use crate::evalproto::bleu::bleu_mean;
use crate::evalproto::cache::{fingerprint, AnswerCache};
use crate::evalproto::metrics::MetricsReport;
use crate::evalproto::{agreement_metrics, extract_generated, hierarchy_analysis, HierarchyReport, IdReport};
use crate::generator::{generate, GenSample, Generator, GeneratorConfig, Vocabulary};
use crate::nn::checkpoint::{self, DType};
use crate::nn::Tensor;
use crate::questions::{LabelVector, QuestionSet};
use crate::reliance::{reliance_report, AttentionTrace, RelianceSummary};
use crate::rng::derive;
use crate::synthdata::Dataset;

/// Frozen backbone outputs for every sample of a dataset.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub tokens: Vec<Arc<Tensor>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn extract(backbone: &Backbone, data: &Dataset) -> Result<Self> {
        let mut tokens = Vec::with_capacity(data.len());
        let mut embeddings = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let (t, e) = backbone.features(&data.volume(i)?)?;
            tokens.push(Arc::new(t));
            embeddings.push(e);
        }
        Ok(Self { tokens, embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let (rows, cols) = self.tokens.first().map(|t| t.shape()).unwrap_or((0, 0));
        let mut tok = Tensor::zeros(n * rows, cols);
        for (i, t) in self.tokens.iter().enumerate() {
            tok.data[i * rows * cols..(i + 1) * rows * cols].copy_from_slice(&t.data);
        }
        let e = self.embeddings.first().map(Vec::len).unwrap_or(0);
        let emb = Tensor::from_vec(n, e, self.embeddings.concat());
        let meta = serde_json::json!({ "samples": n, "tokens_per_sample": rows });
        checkpoint::write(path, "feature_bank", &meta, &[("tokens", &tok), ("embeddings", &emb)], DType::F64)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != "feature_bank" {
            return Err(Error::Format(format!("{} holds a {:?}, not a feature bank", path.display(), c.kind)));
        }
        let n = c.meta["samples"].as_u64().unwrap_or(0) as usize;
        let rows = c.meta["tokens_per_sample"].as_u64().unwrap_or(0) as usize;
        let tok = c.tensor("tokens")?;
        let emb = c.tensor("embeddings")?;
        let tokens = (0..n).map(|i| Arc::new(tok.slice_rows(i * rows, rows))).collect();
        let embeddings = (0..n).map(|i| emb.row(i).to_vec()).collect();
        Ok(Self { tokens, embeddings })
    }
}

/// Test-time (or training-time) origin of cue prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "flip_rate", rename_all = "lowercase")]
pub enum CueSetting {
    None,
    Gt,
    Probe,
    /// Ground truth with every entry flipped independently at this rate.
    Noisy(f64),
}

impl CueSetting {
    pub fn source(self) -> CueSource {
        match self {
            CueSetting::None => CueSource::None,
            CueSetting::Gt => CueSource::Gt,
            CueSetting::Probe => CueSource::Probe,
            CueSetting::Noisy(_) => CueSource::Noisy,
        }
    }

    /// Short machine name: `none`, `gt`, `probe`, `noisy0.1`.
    pub fn key(self) -> String {
        match self {
            CueSetting::None => "none".into(),
            CueSetting::Gt => "gt".into(),
            CueSetting::Probe => "probe".into(),
            CueSetting::Noisy(r) => format!("noisy{r}"),
        }
    }

    /// Table row label.
    pub fn label(self) -> String {
        match self {
            CueSetting::None => "No DCP".into(),
            CueSetting::Gt => "GT-DCP".into(),
            CueSetting::Probe => "DCP-1 (probe)".into(),
            CueSetting::Noisy(r) => format!("DCP-2 (noisy {r})"),
        }
    }

    /// Parses `none`, `gt`, `probe`, `noisy` (rate from `default_rate`) or `noisy:<rate>`.
    pub fn parse(s: &str, default_rate: f64) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let rate = |r: &str| -> Result<f64> {
            let v: f64 = r.parse().map_err(|_| Error::Config(format!("bad flip rate {r:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("flip rate {v} outside [0, 1]")));
            }
            Ok(v)
        };
        match s.as_str() {
            "none" => Ok(CueSetting::None),
            "gt" => Ok(CueSetting::Gt),
            "probe" => Ok(CueSetting::Probe),
            "noisy" => Ok(CueSetting::Noisy(rate(&default_rate.to_string())?)),
            _ => match s.strip_prefix("noisy:").or_else(|| s.strip_prefix("noisy")) {
                Some(r) => Ok(CueSetting::Noisy(rate(r)?)),
                None => Err(Error::Config(format!("unknown cue source {s:?} (none | gt | probe | noisy[:rate])"))),
            },
        }
    }
}

/// Question sets that supply cues, with the probes that predict them.
#[derive(Clone, Debug)]
pub struct CueSpec {
    pub sets: Vec<QuestionSet>,
    pub probes: Vec<LinearProbe>,
    pub seed: u64,
}

impl CueSpec {
    pub fn new(sets: Vec<QuestionSet>, seed: u64) -> Self {
        Self { sets, probes: Vec::new(), seed }
    }

    /// Cue entities of sample `idx` under `setting`, before any dropout.
    pub fn entities(&self, setting: CueSetting, data: &Dataset, idx: usize, embedding: Option<&[f64]>) -> Result<Vec<CueEntity>> {
        let gt = &data.samples[idx].gt;
        let mut labels: Vec<LabelVector> = Vec::with_capacity(self.sets.len());
        for (k, qs) in self.sets.iter().enumerate() {
            let truth = qs.project(gt.labels(qs.id))?;
            let l = match setting {
                CueSetting::None => LabelVector { qs: qs.id, values: vec![0; qs.arity()] },
                CueSetting::Gt => truth,
                CueSetting::Noisy(r) => simulate_cue_source(&truth, &vec![r; qs.arity()], derive(derive(self.seed, idx as u64), k as u64))?,
                CueSetting::Probe => {
                    let probe = self
                        .probes
                        .iter()
                        .find(|p| p.qs == *qs)
                        .ok_or_else(|| Error::Config(format!("no probe for cue set {}", qs.id.label())))?;
                    let emb = embedding.ok_or_else(|| Error::Config("probe cues need backbone embeddings".into()))?;
                    predict(probe, emb)?.0
                }
            };
            labels.push(l);
        }
        let pairs: Vec<(&QuestionSet, &LabelVector)> = self.sets.iter().zip(&labels).collect();
        labels_to_entities(&pairs)
    }
}

pub fn train_probes(bank: &FeatureBank, data: &Dataset, sets: &[QuestionSet], cfg: &ProbeConfig) -> Result<Vec<ProbeTraining>> {
    sets.iter()
        .map(|qs| {
            let labels = data.samples.iter().map(|s| qs.project(s.gt.labels(qs.id))).collect::<Result<Vec<_>>>()?;
            train_probe(&bank.embeddings, &labels, qs, cfg)
        })
        .collect()
}

/// Generator training items: visual tokens, tokenized reference report and training cues.
pub fn generator_samples(data: &Dataset, bank: Option<&FeatureBank>, vocab: &Vocabulary, cues: &CueSpec, setting: CueSetting) -> Result<Vec<GenSample>> {
    (0..data.len())
        .map(|i| {
            let s = &data.samples[i];
            Ok(GenSample {
                id: s.id.clone(),
                visual: bank.map(|b| b.tokens[i].clone()),
                report_ids: vocab.tokenize(&s.report.flat_text)?,
                cues: cues.entities(setting, data, i, bank.map(|b| b.embeddings[i].as_slice()))?,
            })
        })
        .collect()
}

/// One generated report, as written to `generations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub cue_source: String,
    pub dropout_rate: f64,
    pub report: String,
    pub truncated: bool,
    pub trace_file: Option<String>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub setting: CueSetting,
    /// One report per evaluation question set, in the order given.
    pub metrics: Vec<MetricsReport>,
    pub hierarchy: Option<HierarchyReport>,
    pub bleu_mean: f64,
    pub records: Vec<GenerationRecord>,
    pub traces: Vec<AttentionTrace>,
    /// `None` when the prompts carry no image or no cue region.
    pub reliance: Option<RelianceSummary>,
}

impl EvalOutput {
    pub fn macro_f1(&self, k: usize) -> f64 {
        self.metrics[k].macro_f1
    }
}

pub struct EvalRequest<'a> {
    pub data: &'a Dataset,
    pub bank: Option<&'a FeatureBank>,
    pub cues: &'a CueSpec,
    pub setting: CueSetting,
    /// QS1, QS2, QS3 in that order (subsets allowed).
    pub eval_sets: &'a [QuestionSet],
    pub max_len: usize,
    pub dropout_rate: f64,
    /// Caps the number of evaluated samples.
    pub limit: Option<usize>,
}

/// Greedy generation for every sample followed by agreement metrics against the references.
pub fn evaluate_generator(gen: &Generator, req: &EvalRequest, cache: &mut AnswerCache) -> Result<EvalOutput> {
    let n = req.limit.map(|l| l.min(req.data.len())).unwrap_or(req.data.len());
    let mut preds = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut bleu = 0.0;
    for i in 0..n {
        let s = &req.data.samples[i];
        let emb = req.bank.map(|b| b.embeddings[i].as_slice());
        let entities = req.cues.entities(req.setting, req.data, i, emb)?;
        let cue = template(&entities, req.setting.source());
        let visual = req.bank.map(|b| b.tokens[i].as_ref());
        let out = generate(gen, visual, Some(&cue), req.max_len)?;
        bleu += bleu_mean(&out.text, &s.report.flat_text);
        preds.push(IdReport { id: s.id.clone(), text: out.text.clone() });
        refs.push(IdReport { id: s.id.clone(), text: s.report.flat_text.clone() });
        records.push(GenerationRecord {
            id: s.id.clone(),
            cue_source: req.setting.key(),
            dropout_rate: req.dropout_rate,
            report: out.text,
            truncated: out.truncated,
            trace_file: None,
        });
        traces.push(out.trace);
    }
    let mut metrics = Vec::with_capacity(req.eval_sets.len());
    for qs in req.eval_sets {
        let mut m = agreement_metrics(&preds, &refs, qs, cache)?;
        m.bleu_mean = Some(if n == 0 { 0.0 } else { bleu / n as f64 });
        metrics.push(m);
    }
    let hierarchy = (metrics.len() == 3).then(|| hierarchy_analysis(&metrics[0], &metrics[1], &metrics[2], &extract_generated(&preds)));
    let usable = traces.iter().all(|t| !t.image.is_empty() && !t.text.is_empty() && t.steps() > 0);
    let reliance = if usable && traces.len() >= 2 { Some(reliance_report(&traces)?) } else { None };
    Ok(EvalOutput {
        setting: req.setting,
        metrics,
        hierarchy,
        bleu_mean: if n == 0 { 0.0 } else { bleu / n as f64 },
        records,
        traces,
        reliance,
    })
}

/// Cache keyed by the evaluation question sets.
pub fn answer_cache(eval_sets: &[QuestionSet]) -> AnswerCache {
    AnswerCache::new(fingerprint(eval_sets))
}

/// Copy of a pretrained generator switched to (or from) the cue-only prompt layout.
pub fn with_image_mode(base: &Generator, no_image: bool) -> Result<Generator> {
    if base.cfg.no_image == no_image {
        return Ok(base.clone());
    }
    let mut g = Generator::new(GeneratorConfig { no_image, ..base.cfg.clone() }, base.vocab.clone())?;
    g.store.load_from(&base.store)?;
    g.adapters = base.adapters;
    g.pretrain_perplexity = base.pretrain_perplexity;
    Ok(g)
}

/// Tokenized reference reports of a dataset.
pub fn report_corpus(data: &Dataset, vocab: &Vocabulary, limit: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let n = limit.map(|l| l.min(data.len())).unwrap_or(data.len());
    data.samples[..n].iter().map(|s| vocab.tokenize(&s.report.flat_text)).collect()
}
