//! Cue prompts: positive labels become entities, entities are dropped at
//! random during training, and the survivors are rendered into one templated
//! sentence whose entity token spans are recorded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::vocab::split_words;
use crate::questions::{qs2_entry, qs3_entry, LabelVector, QsId, QuestionSet, QS1_NOUNS};
use crate::rng::{stream, streams};

pub const PHRASE_TABLE_VERSION: &str = "phrases-v1";
pub const PREAMBLE: &str = "Findings summary:";
pub const EMPTY_CUE: &str = "Findings summary: none provided.";

/// Canonical cue phrase of a question.
pub fn surface(qs: QsId, index: usize) -> String {
    match qs {
        QsId::Qs1 => QS1_NOUNS[index].to_string(),
        QsId::Qs2 => {
            let (k, s) = qs2_entry(index);
            format!("{}, {}", k.name(), s.phrase_for(k))
        }
        QsId::Qs3 => {
            let (k, l) = qs3_entry(index);
            format!("{}, {}", k.name(), l.phrase())
        }
    }
}

/// Every `(set, index, phrase)` entry.
pub fn phrase_table() -> Vec<(QsId, usize, String)> {
    QsId::ALL
        .iter()
        .flat_map(|qs| (0..qs.full_arity()).map(move |i| (*qs, i, surface(*qs, i))))
        .collect()
}

pub fn phrase_table_json() -> serde_json::Value {
    let entries: Vec<serde_json::Value> = phrase_table()
        .into_iter()
        .map(|(qs, i, s)| serde_json::json!({ "set": qs, "index": i, "surface": s }))
        .collect();
    serde_json::json!({ "version": PHRASE_TABLE_VERSION, "entries": entries })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CueEntity {
    pub qs: QsId,
    /// Index into the full question table of `qs`.
    pub question_index: usize,
    pub surface: String,
}

impl CueEntity {
    pub fn new(qs: QsId, question_index: usize) -> Self {
        Self { qs, question_index, surface: surface(qs, question_index) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueSource {
    Gt,
    Probe,
    Noisy,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity: CueEntity,
    /// Token range `[start, end)` within the cue prompt's own tokens.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuePrompt {
    pub text: String,
    pub entity_spans: Vec<EntitySpan>,
    pub source: CueSource,
}

/// One entity per positive entry, ordered by question set then question.
pub fn labels_to_entities(cues: &[(&QuestionSet, &LabelVector)]) -> Result<Vec<CueEntity>> {
    let mut sorted: Vec<_> = cues.to_vec();
    sorted.sort_by_key(|(qs, _)| qs.id);
    let mut out = Vec::new();
    for (qs, labels) in sorted {
        labels.check_arity(qs)?;
        for (pos, v) in labels.values.iter().enumerate() {
            if *v != 0 {
                out.push(CueEntity::new(qs.id, qs.indices[pos]));
            }
        }
    }
    Ok(out)
}

/// Keeps each entity independently with probability `1 − p`.
pub fn prompt_dropout(entities: &[CueEntity], p: f64, seed: u64) -> Result<Vec<CueEntity>> {
    Ok(entities.iter().zip(dropout_mask(entities.len(), p, seed)?).filter(|(_, keep)| *keep).map(|(e, _)| e.clone()).collect())
}

/// Keep flags drawn by [`prompt_dropout`].
pub fn dropout_mask(n: usize, p: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1]")));
    }
    let mut rng = stream(seed, streams::DROPOUT);
    Ok((0..n).map(|_| rng.random::<f64>() >= p).collect())
}

/// `"Findings summary: a, b, c."`, or the sentinel for no entities.
pub fn template(entities: &[CueEntity], source: CueSource) -> CuePrompt {
    if entities.is_empty() {
        return CuePrompt { text: EMPTY_CUE.to_string(), entity_spans: Vec::new(), source };
    }
    let mut pos = split_words(PREAMBLE).len();
    let mut spans = Vec::with_capacity(entities.len());
    for (i, e) in entities.iter().enumerate() {
        if i > 0 {
            pos += 1;
        }
        let n = split_words(&e.surface).len();
        spans.push(EntitySpan { entity: e.clone(), start: pos, end: pos + n });
        pos += n;
    }
    let body = entities.iter().map(|e| e.surface.as_str()).collect::<Vec<_>>().join(", ");
    CuePrompt { text: format!("{PREAMBLE} {body}."), entity_spans: spans, source }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_template_and_span() {
        let p = template(&[CueEntity::new(QsId::Qs1, 10)], CueSource::Gt);
        assert_eq!(p.text, "Findings summary: lung nodule.");
        let toks = split_words(&p.text);
        let s = &p.entity_spans[0];
        assert_eq!(toks[s.start..s.end].join(" "), "lung nodule");
    }

    #[test]
    fn empty_is_sentinel() {
        let p = template(&[], CueSource::None);
        assert_eq!(p.text, EMPTY_CUE);
        assert!(p.entity_spans.is_empty());
    }

    #[test]
    fn entity_ordering_follows_sets() {
        let qs1 = QuestionSet::full(QsId::Qs1);
        let qs3 = QuestionSet::full(QsId::Qs3);
        let mut l1 = LabelVector::full_zeros(QsId::Qs1);
        l1.values[10] = 1;
        let mut l3 = LabelVector::full_zeros(QsId::Qs3);
        l3.values[14] = 1;
        let e = labels_to_entities(&[(&qs3, &l3), (&qs1, &l1)]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].qs, QsId::Qs1);
        assert_eq!(e[1].surface, "lung nodule, left lower lobe");
    }

    #[test]
    fn dropout_extremes() {
        let e: Vec<CueEntity> = (0..18).map(|i| CueEntity::new(QsId::Qs1, i)).collect();
        assert_eq!(prompt_dropout(&e, 0.0, 1).unwrap(), e);
        assert!(prompt_dropout(&e, 1.0, 1).unwrap().is_empty());
        assert!(prompt_dropout(&e, -0.1, 1).is_err());
    }
}
