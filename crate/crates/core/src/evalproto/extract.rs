//! Rule-based answer extraction, the inverse of the report grammar.
//!
//! Each question is answered independently, the way a QA model would answer
//! it: a presence question is "yes" when some sentence asserts the finding
//! and none negates it; a laterality or lobe question is "yes" when some
//! positive sentence places the finding there.

use crate::error::{Error, Result};
use crate::questions::{qs2_index, qs3_index, FindingKind, LabelVector, Lobe, QsId, QuestionSet, Side, QS1_NOUNS};
use crate::synthdata::report::{SECTIONS, UNSTRUCTURED_SECTION};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Location {
    Side(Side),
    Lobe(Lobe),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Statement {
    /// Positive mention of a presence question, optionally located.
    Positive { qs1: usize, kind: Option<FindingKind>, location: Option<Location> },
    Negation { qs1: usize },
}

/// Full-width answers for all three sets, plus sentences that failed to parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    pub qs1: LabelVector,
    pub qs2: LabelVector,
    pub qs3: LabelVector,
    pub failures: Vec<String>,
    pub sentences: usize,
}

impl Extraction {
    pub fn labels(&self, qs: QsId) -> &LabelVector {
        match qs {
            QsId::Qs1 => &self.qs1,
            QsId::Qs2 => &self.qs2,
            QsId::Qs3 => &self.qs3,
        }
    }

    pub fn answers(&self, qs: &QuestionSet) -> Result<LabelVector> {
        qs.project(self.labels(qs.id))
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Splits report text into sentences, dropping section headers.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split('.') {
        let mut words: Vec<&str> = piece.split_whitespace().collect();
        while let Some(first) = words.first() {
            let is_header = first
                .strip_suffix(':')
                .is_some_and(|h| SECTIONS.contains(&h) || h == UNSTRUCTURED_SECTION);
            if is_header {
                words.remove(0);
            } else if words.len() >= 2 && words[1] == ":" && (SECTIONS.contains(first) || *first == UNSTRUCTURED_SECTION) {
                words.drain(..2);
            } else {
                break;
            }
        }
        if !words.is_empty() {
            out.push(words.join(" "));
        }
    }
    out
}

fn lookup_name(name: &str) -> Option<usize> {
    if let Some(i) = QS1_NOUNS.iter().position(|n| *n == name) {
        return Some(i);
    }
    FindingKind::ALL.iter().find(|k| k.name() == name || k.noun() == name).map(|k| k.qs1_index())
}

fn lookup_subject(subject: &str) -> Option<(usize, Option<FindingKind>)> {
    if let Some(k) = FindingKind::ALL.iter().find(|k| k.noun() == subject || k.name() == subject) {
        return Some((k.qs1_index(), Some(*k)));
    }
    QS1_NOUNS.iter().position(|n| *n == subject).map(|i| (i, FindingKind::from_qs1_index(i)))
}

fn lookup_location(loc: &str, kind: Option<FindingKind>) -> Option<Location> {
    if let Some(l) = Lobe::ALL.iter().find(|l| l.phrase() == loc) {
        return match kind {
            Some(k) if k.has_lobes() => Some(Location::Lobe(*l)),
            _ => None,
        };
    }
    Side::ALL.iter().find(|s| s.lung_phrase() == loc || s.pleural_phrase() == loc).map(|s| Location::Side(*s))
}

/// Parses one sentence (header-free, without its final period).
pub fn parse_sentence(sentence: &str) -> Option<Statement> {
    let s = normalize(sentence);
    let s = s.trim_end_matches('.').trim();
    if let Some(rest) = s.strip_prefix("there is no ") {
        return lookup_name(rest).map(|qs1| Statement::Negation { qs1 });
    }
    if let Some(rest) = s.strip_prefix("no ") {
        let name = rest.strip_suffix(" is seen").unwrap_or(rest);
        return lookup_name(name).map(|qs1| Statement::Negation { qs1 });
    }
    let (subject, tail) = if let Some(rest) = s.strip_prefix("there is ") {
        match rest.split_once(" in the ") {
            Some((a, b)) => (a, Some(b)),
            None => (rest, None),
        }
    } else {
        let (subj, rest) = s.split_once(" is present").or_else(|| s.split_once(" is seen"))?;
        match rest {
            "" => (subj, None),
            r => (subj, Some(r.strip_prefix(" in the ")?)),
        }
    };
    let (qs1, kind) = lookup_subject(subject)?;
    let location = match tail {
        Some(t) => Some(lookup_location(t, kind)?),
        None => None,
    };
    Some(Statement::Positive { qs1, kind, location })
}

/// Extracts answers to all three full question sets. In strict mode the first
/// unparseable sentence is an error; otherwise it is recorded and skipped.
pub fn parse_report(text: &str, strict: bool) -> Result<Extraction> {
    let mut positive = [false; 18];
    let mut negated = [false; 18];
    let mut qs2 = LabelVector::full_zeros(QsId::Qs2);
    let mut qs3 = LabelVector::full_zeros(QsId::Qs3);
    let mut failures = Vec::new();
    let sentences = split_sentences(text);
    for sentence in &sentences {
        match parse_sentence(sentence) {
            Some(Statement::Negation { qs1 }) => negated[qs1] = true,
            Some(Statement::Positive { qs1, kind, location }) => {
                positive[qs1] = true;
                if let (Some(kind), Some(loc)) = (kind, location) {
                    let side = match loc {
                        Location::Side(s) => s,
                        Location::Lobe(l) => {
                            if let Some(i) = qs3_index(kind, l) {
                                qs3.values[i] = 1;
                            }
                            l.side()
                        }
                    };
                    qs2.values[qs2_index(kind, side)] = 1;
                }
            }
            None if strict => return Err(Error::Extraction { sentence: sentence.clone() }),
            None => failures.push(sentence.clone()),
        }
    }
    let qs1 = LabelVector { qs: QsId::Qs1, values: (0..18).map(|i| u8::from(positive[i] && !negated[i])).collect() };
    Ok(Extraction { qs1, qs2, qs3, failures, sentences: sentences.len() })
}
