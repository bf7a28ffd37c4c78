//! KV-cached greedy decoding with attention capture.

use serde::{Deserialize, Serialize};

use super::prompt::assemble_prompt;
use super::vocab::{BOS, EOS, QUERY};
use super::Generator;
use crate::cueprompt::CuePrompt;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::generator::model::KvCache;
use crate::reliance::AttentionTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated word ids, without BOS/EOS.
    pub ids: Vec<usize>,
    pub text: String,
    /// `max_len` tokens were produced without EOS.
    pub truncated: bool,
    #[serde(skip)]
    pub trace: AttentionTrace,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Layer-averaged attention of the generating position, restricted to the
/// prompt and renormalised to sum to one.
fn prompt_row(per_layer: &[Vec<f64>], prompt_len: usize) -> Result<Vec<f64>> {
    let mut row = vec![0.0; prompt_len];
    for layer in per_layer {
        for (r, a) in row.iter_mut().zip(layer) {
            *r += a / per_layer.len() as f64;
        }
    }
    let z: f64 = row.iter().sum();
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::DegenerateTrace);
    }
    row.iter_mut().for_each(|v| *v /= z);
    Ok(row)
}

/// Greedy decoding of at most `max_len` tokens (EOS included). `cue = None`
/// omits the cue region entirely (stage-1 prompts); pass the empty-cue
/// sentinel for the no-cue test setting.
pub fn generate(gen: &Generator, visual: Option<&Tensor>, cue: Option<&CuePrompt>, max_len: usize) -> Result<Generation> {
    let m = gen.cfg.prompt_image_tokens();
    let prompt = assemble_prompt(&gen.vocab, m, cue, QUERY)?;
    let s = prompt.len();
    let mut text_ids = prompt.text_ids();
    text_ids.push(BOS);
    let emb = gen.decoder.embed_apply(&gen.store, &text_ids);
    let x0 = if m > 0 {
        let visual = visual.ok_or_else(|| Error::Config("image-conditioned generator needs visual tokens".into()))?;
        let img = gen.project(visual)?;
        Tensor::concat_rows(&[&img, &emb])
    } else {
        emb
    };

    let mut cache = KvCache::default();
    let (mut hidden, mut attn) = gen.decoder.step(&gen.store, &x0, &mut cache, gen.adapters);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut truncated = true;
    for _ in 0..max_len {
        rows.push(prompt_row(&attn, s)?);
        let logits = gen.decoder.logits_of(&gen.store, hidden.row(hidden.rows - 1));
        let tok = argmax(&logits);
        if tok == EOS {
            truncated = false;
            break;
        }
        ids.push(tok);
        let x = gen.decoder.embed_apply(&gen.store, &[tok]);
        (hidden, attn) = gen.decoder.step(&gen.store, &x, &mut cache, gen.adapters);
    }
    let r = &prompt.regions;
    let trace = AttentionTrace {
        prompt_len: s,
        image: r.image_positions(),
        text: r.text_positions(),
        query: r.query.clone().collect(),
        rows,
    };
    Ok(Generation { text: gen.vocab.detokenize(&ids), ids, truncated, trace })
}
