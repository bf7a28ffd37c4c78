//! Flat experiment configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pipeline::CueSetting;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::discriminator::ProbeConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, TrainConfig};
use crate::questions::{QsId, QuestionSet};
use crate::rng::derive;
use crate::synthdata::DatasetConfig;

/// Every knob of an experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub data_train_size: usize,
    pub data_eval_size: usize,
    /// Disjoint phantoms used only for supervised backbone pretraining.
    pub data_pretrain_size: usize,
    pub data_noise_std: f64,
    pub data_prevalence: f64,
    /// `false` renders every report as one shuffled paragraph.
    pub data_structured_reports: bool,

    pub backbone_c_in: usize,
    pub backbone_pretrain_epochs: usize,
    pub backbone_pretrain_lr: f64,

    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_threshold: f64,

    pub gen_d_model: usize,
    pub gen_blocks: usize,
    pub gen_heads: usize,
    pub gen_image_tokens: usize,
    pub gen_lora_rank: usize,
    pub gen_lora_alpha: f64,

    pub batch_size: usize,
    pub decoder_epochs: usize,
    pub decoder_lr: f64,
    /// Held-out perplexity the pretrained decoder must reach.
    pub decoder_max_perplexity: f64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,

    /// Prompt-dropout rate for stage 2.
    pub dropout: f64,
    /// `gt`, `probe`, `noisy` or `noisy:<rate>`.
    pub train_cue_source: String,
    /// `none`, `gt`, `probe`, `noisy` or `noisy:<rate>`.
    pub test_cue_source: String,
    /// Flip rate used when a cue source is plain `noisy`.
    pub noisy_flip_rate: f64,
    /// Question sets rendered into cue prompts: `qs1`, `qs2`, `qs3`.
    pub cue_sets: Vec<String>,
    pub no_image: bool,

    pub eval_max_len: usize,
    /// Evaluate only the first `n` eval phantoms; 0 means all.
    pub eval_limit: usize,

    pub ablate_dropouts: Vec<f64>,
    pub ablate_settings: Vec<String>,

    /// Root for `runs/<hash>/`; not part of the hash.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let gen = GeneratorConfig::default();
        Self {
            seed: 0,
            data_train_size: 2000,
            data_eval_size: 500,
            data_pretrain_size: 1000,
            data_noise_std: data.noise_std,
            data_prevalence: data.prevalence[0],
            data_structured_reports: true,
            backbone_c_in: 32,
            backbone_pretrain_epochs: 32,
            backbone_pretrain_lr: 4e-3,
            probe_lr: 1e-2,
            probe_epochs: 600,
            probe_threshold: 0.5,
            gen_d_model: 64,
            gen_blocks: 2,
            gen_heads: gen.heads,
            gen_image_tokens: gen.image_tokens,
            gen_lora_rank: gen.lora_rank,
            gen_lora_alpha: gen.lora_alpha,
            batch_size: 16,
            decoder_epochs: 8,
            decoder_lr: 3e-3,
            decoder_max_perplexity: 3.0,
            stage1_epochs: 4,
            stage1_lr: 2e-3,
            stage2_epochs: 10,
            stage2_lr: 2e-3,
            dropout: 0.3,
            train_cue_source: "gt".into(),
            test_cue_source: "gt".into(),
            noisy_flip_rate: 0.1,
            cue_sets: vec!["qs1".into()],
            no_image: false,
            eval_max_len: 80,
            eval_limit: 0,
            ablate_dropouts: vec![0.0, 0.1, 0.3, 0.5, 0.7],
            ablate_settings: vec!["gt".into(), "probe".into(), "noisy".into(), "none".into()],
            output_dir: PathBuf::from("runs"),
        }
    }
}

// Per-role seeds, so that changing one stage's seed never shifts another's.
const SEED_TRAIN: u64 = 1;
const SEED_EVAL: u64 = 2;
const SEED_PRETRAIN: u64 = 3;
const SEED_BACKBONE: u64 = 4;
const SEED_PROBE: u64 = 5;
const SEED_GEN: u64 = 6;
const SEED_CUES: u64 = 7;
const SEED_DECODER: u64 = 8;
const SEED_STAGE1: u64 = 9;
const SEED_STAGE2: u64 = 10;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data_train_size < 2 || self.data_eval_size < 2 {
            return bad("data_train_size and data_eval_size must be at least 2".into());
        }
        for (k, v) in [("dropout", self.dropout), ("data_prevalence", self.data_prevalence), ("noisy_flip_rate", self.noisy_flip_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} = {v} is outside [0, 1]"));
            }
        }
        if let Some(p) = self.ablate_dropouts.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("ablate_dropouts contains {p}, outside [0, 1]"));
        }
        if self.cue_sets.is_empty() {
            return bad("cue_sets must name at least one question set".into());
        }
        self.train_cue_setting()?;
        self.test_cue_setting()?;
        self.ablate_cue_settings()?;
        self.cue_question_sets()?;
        self.backbone_config().validate()?;
        self.generator_config().validate()?;
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.hash())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut d = DatasetConfig { noise_std: self.data_noise_std, prevalence: [self.data_prevalence; 4], ..DatasetConfig::default() };
        d.report.structured = self.data_structured_reports;
        d
    }

    pub fn train_seed(&self) -> u64 {
        derive(self.seed, SEED_TRAIN)
    }

    pub fn eval_seed(&self) -> u64 {
        derive(self.seed, SEED_EVAL)
    }

    pub fn pretrain_seed(&self) -> u64 {
        derive(self.seed, SEED_PRETRAIN)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { c_in: self.backbone_c_in, seed: derive(self.seed, SEED_BACKBONE), ..BackboneConfig::default() }
    }

    pub fn backbone_pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.backbone_pretrain_epochs,
            lr: self.backbone_pretrain_lr,
            batch_size: self.batch_size,
            resample: true,
            seed: derive(derive(self.seed, SEED_BACKBONE), 1),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            epochs: self.probe_epochs,
            threshold: self.probe_threshold,
            seed: derive(self.seed, SEED_PROBE),
            ..ProbeConfig::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            c_in: self.backbone_c_in,
            image_tokens: self.gen_image_tokens,
            projector_hidden: self.gen_d_model,
            d_model: self.gen_d_model,
            blocks: self.gen_blocks,
            heads: self.gen_heads,
            lora_rank: self.gen_lora_rank,
            lora_alpha: self.gen_lora_alpha,
            no_image: self.no_image,
            seed: derive(self.seed, SEED_GEN),
            ..GeneratorConfig::default()
        }
    }

    fn schedule(&self, epochs: usize, lr: f64, role: u64) -> TrainConfig {
        TrainConfig { epochs, batch_size: self.batch_size, lr, clip_norm: Some(1.0), seed: derive(self.seed, role) }
    }

    pub fn decoder_schedule(&self) -> TrainConfig {
        self.schedule(self.decoder_epochs, self.decoder_lr, SEED_DECODER)
    }

    pub fn stage1_schedule(&self) -> TrainConfig {
        self.schedule(self.stage1_epochs, self.stage1_lr, SEED_STAGE1)
    }

    pub fn stage2_schedule(&self) -> TrainConfig {
        self.schedule(self.stage2_epochs, self.stage2_lr, SEED_STAGE2)
    }

    pub fn cue_seed(&self) -> u64 {
        derive(self.seed, SEED_CUES)
    }

    pub fn train_cue_setting(&self) -> Result<CueSetting> {
        let s = CueSetting::parse(&self.train_cue_source, self.noisy_flip_rate)?;
        if s == CueSetting::None {
            return Err(Error::Config("train_cue_source cannot be none; use dropout = 1 instead".into()));
        }
        Ok(s)
    }

    pub fn test_cue_setting(&self) -> Result<CueSetting> {
        CueSetting::parse(&self.test_cue_source, self.noisy_flip_rate)
    }

    pub fn ablate_cue_settings(&self) -> Result<Vec<CueSetting>> {
        self.ablate_settings.iter().map(|s| CueSetting::parse(s, self.noisy_flip_rate)).collect()
    }

    pub fn cue_question_sets(&self) -> Result<Vec<QuestionSet>> {
        self.cue_sets.iter().map(|s| parse_question_set(s)).collect()
    }

    /// QS1 (toy subset), QS2 and QS3: the sets every evaluation reports.
    pub fn eval_question_sets() -> Vec<QuestionSet> {
        vec![QuestionSet::toy_qs1(), QuestionSet::full(QsId::Qs2), QuestionSet::full(QsId::Qs3)]
    }

    pub fn probe_question_sets() -> Vec<QuestionSet> {
        Self::eval_question_sets()
    }

    pub fn eval_limit(&self) -> Option<usize> {
        (self.eval_limit > 0).then_some(self.eval_limit)
    }
}

/// `qs1` is the toy presence subset; `qs2` and `qs3` are the full sets.
pub fn parse_question_set(s: &str) -> Result<QuestionSet> {
    match s.trim().to_ascii_lowercase().as_str() {
        "qs1" => Ok(QuestionSet::toy_qs1()),
        "qs2" => Ok(QuestionSet::full(QsId::Qs2)),
        "qs3" => Ok(QuestionSet::full(QsId::Qs3)),
        other => Err(Error::Config(format!("unknown question set {other:?} (qs1 | qs2 | qs3)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { dropout: 0.5, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn partial_file_fills_defaults_and_unknown_keys_fail() {
        let c = ExperimentConfig::from_toml("seed = 4\ndropout = 0.5\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.data_eval_size, 500);
        assert!(ExperimentConfig::from_toml("dropuot = 0.5\n").is_err());
        assert!(ExperimentConfig::from_toml("dropout = 1.5\n").is_err());
        assert!(ExperimentConfig::from_toml("train_cue_source = \"none\"\n").is_err());
        assert!(ExperimentConfig::from_toml("cue_sets = [\"qs9\"]\n").is_err());
    }

    #[test]
    fn cue_sources_parse() {
        let c = ExperimentConfig { test_cue_source: "noisy".into(), noisy_flip_rate: 0.2, ..Default::default() };
        assert_eq!(c.test_cue_setting().unwrap(), CueSetting::Noisy(0.2));
        let c = ExperimentConfig { test_cue_source: "noisy:0.3".into(), ..Default::default() };
        assert_eq!(c.test_cue_setting().unwrap(), CueSetting::Noisy(0.3));
    }
}
