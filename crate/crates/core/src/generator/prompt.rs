//! Prompt layout `[image tokens ; cue tokens ; query tokens]` followed by the
//! report `BOS … EOS`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, QUERY};
use crate::cueprompt::CuePrompt;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regions {
    pub image: Range<usize>,
    pub text: Range<usize>,
    pub query: Range<usize>,
}

impl Regions {
    pub fn prompt_len(&self) -> usize {
        self.query.end
    }

    pub fn image_positions(&self) -> Vec<usize> {
        self.image.clone().collect()
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.text.clone().collect()
    }
}

/// Token-level prompt: the image rows are supplied separately by the projector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub image_tokens: usize,
    pub cue_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub regions: Regions,
}

impl PromptSequence {
    /// Text ids following the image rows.
    pub fn text_ids(&self) -> Vec<usize> {
        self.cue_ids.iter().chain(&self.query_ids).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.regions.prompt_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds the prompt from its parts; regions are recomputed, not trusted.
    pub fn reassemble(&self) -> PromptSequence {
        assemble_ids(self.image_tokens, self.cue_ids.clone(), self.query_ids.clone())
    }
}

pub fn assemble_ids(image_tokens: usize, cue_ids: Vec<usize>, query_ids: Vec<usize>) -> PromptSequence {
    let image = 0..image_tokens;
    let text = image.end..image.end + cue_ids.len();
    let query = text.end..text.end + query_ids.len();
    PromptSequence { image_tokens, cue_ids, query_ids, regions: Regions { image, text, query } }
}

/// Lays out `M` image rows, the cue prompt (if any) and the query instruction.
pub fn assemble_prompt(vocab: &Vocabulary, image_tokens: usize, cue: Option<&CuePrompt>, query_text: &str) -> Result<PromptSequence> {
    let cue_ids = match cue {
        Some(c) => vocab.encode(&c.text)?,
        None => Vec::new(),
    };
    Ok(assemble_ids(image_tokens, cue_ids, vocab.encode(query_text)?))
}

pub fn default_query(vocab: &Vocabulary) -> Result<Vec<usize>> {
    vocab.encode(QUERY)
}
