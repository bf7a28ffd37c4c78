//! Cue-conditioned report generator: vocabulary, projector, adapter-equipped
//! decoder, two-stage training and greedy decoding.

pub mod decode;
pub mod model;
pub mod prompt;
pub mod train;
pub mod vocab;


use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, DType};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{stream, streams};

pub use decode::{generate, Generation};
pub use model::{Adapters, Decoder, KvCache, Projector};
pub use prompt::{assemble_ids, assemble_prompt, PromptSequence, Regions};
pub use train::{pretrain_decoder, train_stage1, train_stage2, GenSample, PretrainReport, StageReport, TrainConfig};
pub use vocab::Vocabulary;

pub const CHECKPOINT_KIND: &str = "dcppd-generator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Visual token width produced by the backbone.
    pub c_in: usize,
    /// Number of projector query tokens.
    pub image_tokens: usize,
    pub projector_heads: usize,
    pub projector_hidden: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Cue-only variant: prompts carry no image rows in any stage.
    pub no_image: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            c_in: 32,
            image_tokens: 8,
            projector_heads: 4,
            projector_hidden: 128,
            d_model: 128,
            blocks: 4,
            heads: 4,
            ffn_mult: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            no_image: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// 256 query tokens over 384-wide backbone tokens, 768-wide decoder, rank-128 adapters.
    pub fn paper_preset() -> Self {
        Self {
            c_in: 384,
            image_tokens: 256,
            projector_heads: 8,
            projector_hidden: 768,
            d_model: 768,
            blocks: 4,
            heads: 8,
            ffn_mult: 4,
            lora_rank: 128,
            lora_alpha: 256.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_tokens == 0 || self.d_model == 0 || self.blocks == 0 || self.lora_rank == 0 {
            return bad("generator sizes must be positive".into());
        }
        if self.c_in % self.projector_heads != 0 {
            return bad(format!("c_in {} not divisible by projector_heads {}", self.c_in, self.projector_heads));
        }
        if self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return bad(format!("d_model {} needs an even per-head width over {} heads", self.d_model, self.heads));
        }
        Ok(())
    }

    /// Image rows actually present in a prompt.
    pub fn prompt_image_tokens(&self) -> usize {
        if self.no_image {
            0
        } else {
            self.image_tokens
        }
    }
}

/// Projector plus decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub projector: Projector,
    pub decoder: Decoder,
    /// Adapter branch participates in forward passes (set once stage 2 starts).
    pub adapters: Adapters,
    /// Held-out perplexity recorded by decoder pretraining.
    pub pretrain_perplexity: Option<f64>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(cfg.seed, streams::INIT);
        let projector =
            Projector::new(&mut store, cfg.c_in, cfg.image_tokens, cfg.projector_hidden, cfg.d_model, cfg.projector_heads, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            vocab.len(),
            cfg.d_model,
            cfg.blocks,
            cfg.heads,
            cfg.ffn_mult,
            cfg.lora_rank,
            cfg.lora_alpha,
            &mut rng,
        );
        Ok(Self { cfg, vocab, store, projector, decoder, adapters: Adapters::Off, pretrain_perplexity: None })
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.projector.param_ids()
    }

    pub fn decoder_base_ids(&self) -> Vec<ParamId> {
        self.decoder.base_ids()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.decoder.lora_ids()
    }

    pub fn checksum(&self, ids: &[ParamId]) -> String {
        self.store.checksum_of(ids.iter().copied())
    }

    pub(crate) fn trainable(ids: &[ParamId]) -> Arc<HashSet<ParamId>> {
        Arc::new(ids.iter().copied().collect())
    }

    fn check_visual(&self, visual: &Tensor) -> Result<()> {
        if visual.cols != self.cfg.c_in {
            return Err(Error::Shape(format!("visual tokens have width {}, projector expects {}", visual.cols, self.cfg.c_in)));
        }
        if visual.rows == 0 {
            return Err(Error::Shape("visual token sequence is empty".into()));
        }
        Ok(())
    }

    /// `[M × d_model]` image embeddings.
    pub fn project(&self, visual: &Tensor) -> Result<Tensor> {
        self.check_visual(visual)?;
        Ok(self.projector.apply(&self.store, visual))
    }

    /// Builds the embedded sequence `[img ; text ids]` inside `g`.
    pub(crate) fn sequence_graph(&self, g: &mut Graph, visual: Option<&Tensor>, text_ids: &[usize]) -> Result<Var> {
        let emb = self.decoder.embed_ids(g, &self.store, text_ids);
        if self.cfg.no_image {
            return Ok(emb);
        }
        let visual = visual.ok_or_else(|| Error::Config("image-conditioned generator needs visual tokens".into()))?;
        self.check_visual(visual)?;
        let v = g.constant(visual.clone());
        let img = self.projector.forward(g, &self.store, v);
        Ok(g.concat_rows(&[img, emb]))
    }

    /// Logits `[(report_ids.len()) × V]` for the rows from BOS onwards, given
    /// the prompt and the report ids `BOS … EOS`.
    pub fn report_logits(&self, visual: Option<&Tensor>, prompt: &PromptSequence, report_ids: &[usize]) -> Result<Tensor> {
        let mut ids = prompt.text_ids();
        ids.extend_from_slice(report_ids);
        let mut g = Graph::frozen();
        let x = self.sequence_graph(&mut g, visual, &ids)?;
        let out = self.decoder.forward(&mut g, &self.store, x, prompt.len(), self.adapters);
        Ok(g.value(out).clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "vocab": self.vocab.tokens,
            "adapters": self.adapters == Adapters::On,
            "pretrain_perplexity": self.pretrain_perplexity,
        });
        checkpoint::write_store(path, CHECKPOINT_KIND, &meta, &self.store, DType::F64)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("{} holds a {:?} checkpoint, not a generator", path.display(), c.kind)));
        }
        let cfg: GeneratorConfig = serde_json::from_value(c.meta["config"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(c.meta["vocab"].clone())?;
        let adapters = if c.meta["adapters"].as_bool().unwrap_or(false) { Adapters::On } else { Adapters::Off };
        let ppl = c.meta["pretrain_perplexity"].as_f64();
        let mut g = Generator::new(cfg, Vocabulary::from_tokens(tokens))?;
        g.store.load_from(&c.into_store())?;
        g.adapters = adapters;
        g.pretrain_perplexity = ppl;
        Ok(g)
    }
}
