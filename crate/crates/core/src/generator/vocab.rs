//! Closed word-level vocabulary over the report grammar, cue phrases and the
//! query instruction. Punctuation (`.`, `,`, `:`) is split into separate
//! tokens; words are case-sensitive.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cueprompt::{phrase_table, EMPTY_CUE, PREAMBLE};
use crate::error::{Error, Result};
use crate::questions::{FindingKind, Lobe, Side, QS1_NOUNS};
use crate::synthdata::report::{negation_sentence, positive_sentence, SECTIONS, UNSTRUCTURED_SECTION};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const SEP: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<sep>"];

pub const QUERY: &str = "Generate the findings report.";

const PUNCT: [char; 3] = ['.', ',', ':'];

/// Words and punctuation marks of `text`, in order.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            match rest.find(PUNCT) {
                Some(0) => {
                    out.push(&rest[..1]);
                    rest = &rest[1..];
                }
                Some(i) => {
                    out.push(&rest[..i]);
                    rest = &rest[i..];
                }
                None => {
                    out.push(rest);
                    rest = "";
                }
            }
        }
    }
    out
}

/// Joins words with single spaces, attaching punctuation to the preceding word.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut s = String::new();
    for w in words {
        let w = w.as_ref();
        let is_punct = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
        if !s.is_empty() && !is_punct {
            s.push(' ');
        }
        s.push_str(w);
    }
    s
}

pub fn canonicalize(text: &str) -> String {
    join_words(&split_words(text))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Every word the report grammar, the cue templates and the query can produce.
    pub fn closed() -> Self {
        let mut corpus: Vec<String> = vec![QUERY.to_string(), EMPTY_CUE.to_string(), PREAMBLE.to_string()];
        corpus.extend(SECTIONS.iter().map(|s| format!("{s}:")));
        corpus.push(format!("{UNSTRUCTURED_SECTION}:"));
        for style in 0..3 {
            for i in 0..QS1_NOUNS.len() {
                corpus.push(negation_sentence(i, style));
                corpus.push(format!("{} is present.", crate::synthdata::report::capitalize(QS1_NOUNS[i])));
            }
            for kind in FindingKind::ALL {
                corpus.push(positive_sentence(kind, None, style));
                for side in Side::ALL {
                    corpus.push(positive_sentence(kind, Some(side.lung_phrase()), style));
                    corpus.push(positive_sentence(kind, Some(side.pleural_phrase()), style));
                }
                for lobe in Lobe::ALL {
                    corpus.push(positive_sentence(kind, Some(lobe.phrase()), style));
                }
            }
        }
        corpus.extend(phrase_table().into_iter().map(|(_, _, s)| s));
        let mut words = BTreeSet::new();
        for line in &corpus {
            for w in split_words(line) {
                words.insert(w.to_string());
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Vocabulary { word: word.to_string() })
    }

    /// Ids of the words of `text`, without specials.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// `[BOS] words [EOS]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        ids.push(EOS);
        Ok(ids)
    }

    /// Text of the non-special ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids.iter().filter(|i| **i >= SPECIALS.len()).map(|i| self.tokens[*i].as_str()).collect();
        join_words(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_and_joining() {
        assert_eq!(split_words("Lungs: No lung nodule."), vec!["Lungs", ":", "No", "lung", "nodule", "."]);
        assert_eq!(split_words("a,b"), vec!["a", ",", "b"]);
        assert_eq!(canonicalize("Lungs :  No  lung nodule ."), "Lungs: No lung nodule.");
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let v = Vocabulary::closed();
        assert_eq!(v.tokenize("").unwrap(), vec![BOS, EOS]);
        assert!(matches!(v.tokenize("cardiac tamponade"), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn query_round_trips() {
        let v = Vocabulary::closed();
        assert_eq!(v.detokenize(&v.tokenize(QUERY).unwrap()), QUERY);
    }
}
