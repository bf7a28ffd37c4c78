//! The three binary question sets (presence, laterality, lobe), the finding
//! vocabulary they are built from, and label vectors over them.
//!
//! Question strings are canonical: they key every label file, metric row and
//! phrase table entry, and their order is shared by labels, probes, prompts
//! and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Nodule,
    Consolidation,
    Ggo,
    PleuralEffusion,
}

impl FindingKind {
    pub const ALL: [FindingKind; 4] = [FindingKind::Nodule, FindingKind::Consolidation, FindingKind::Ggo, FindingKind::PleuralEffusion];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Presence question answered by this kind.
    pub fn qs1_index(self) -> usize {
        match self {
            FindingKind::Ggo => 7,
            FindingKind::Consolidation => 9,
            FindingKind::Nodule => 10,
            FindingKind::PleuralEffusion => 15,
        }
    }

    pub fn from_qs1_index(i: usize) -> Option<FindingKind> {
        FindingKind::ALL.into_iter().find(|k| k.qs1_index() == i)
    }

    pub fn has_lobes(self) -> bool {
        self != FindingKind::PleuralEffusion
    }

    /// Sentence-initial subject phrase.
    pub fn subject(self) -> &'static str {
        match self {
            FindingKind::Nodule => "A lung nodule",
            FindingKind::Consolidation => "Consolidation",
            FindingKind::Ggo => "Ground-glass opacity",
            FindingKind::PleuralEffusion => "Pleural effusion",
        }
    }

    /// Mid-sentence noun phrase.
    pub fn noun(self) -> &'static str {
        match self {
            FindingKind::Nodule => "a lung nodule",
            FindingKind::Consolidation => "consolidation",
            FindingKind::Ggo => "ground-glass opacity",
            FindingKind::PleuralEffusion => "pleural effusion",
        }
    }

    /// Bare name used in laterality/lobe cue phrases.
    pub fn name(self) -> &'static str {
        match self {
            FindingKind::Nodule => "lung nodule",
            FindingKind::Consolidation => "consolidation",
            FindingKind::Ggo => "ground-glass opacity",
            FindingKind::PleuralEffusion => "pleural effusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 2] = [Side::Left, Side::Right];

    pub fn lung_phrase(self) -> &'static str {
        match self {
            Side::Left => "left lung",
            Side::Right => "right lung",
        }
    }

    pub fn pleural_phrase(self) -> &'static str {
        match self {
            Side::Left => "left pleural space",
            Side::Right => "right pleural space",
        }
    }

    /// Location phrase appropriate for `kind`.
    pub fn phrase_for(self, kind: FindingKind) -> &'static str {
        if kind == FindingKind::PleuralEffusion {
            self.pleural_phrase()
        } else {
            self.lung_phrase()
        }
    }

    pub fn lobes(self) -> &'static [Lobe] {
        match self {
            Side::Left => &[Lobe::Lul, Lobe::Lll],
            Side::Right => &[Lobe::Rul, Lobe::Rml, Lobe::Rll],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lobe {
    #[serde(rename = "RUL")]
    Rul,
    #[serde(rename = "RML")]
    Rml,
    #[serde(rename = "RLL")]
    Rll,
    #[serde(rename = "LUL")]
    Lul,
    #[serde(rename = "LLL")]
    Lll,
}

impl Lobe {
    /// Lobar question order.
    pub const ALL: [Lobe; 5] = [Lobe::Rul, Lobe::Rml, Lobe::Rll, Lobe::Lul, Lobe::Lll];

    pub fn side(self) -> Side {
        match self {
            Lobe::Lul | Lobe::Lll => Side::Left,
            _ => Side::Right,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Lobe::Rul => "right upper lobe",
            Lobe::Rml => "right middle lobe",
            Lobe::Rll => "right lower lobe",
            Lobe::Lul => "left upper lobe",
            Lobe::Lll => "left lower lobe",
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Lobe::Rul => "RUL",
            Lobe::Rml => "RML",
            Lobe::Rll => "RLL",
            Lobe::Lul => "LUL",
            Lobe::Lll => "LLL",
        }
    }

    pub fn index(self) -> usize {
        Lobe::ALL.iter().position(|l| *l == self).unwrap()
    }
}

pub const QS1_QUESTIONS: [&str; 18] = [
    "Is there any medical material or device present?",
    "Is there arterial wall calcification?",
    "Is cardiomegaly or cardiac enlargement suspected based on the imaging findings?",
    "Is pericardial effusion present?",
    "Is there coronary artery wall calcification?",
    "Is there emphysema?",
    "Is there any atelectasis?",
    "Is there any lung opacity (e.g., ground-glass opacity or other parenchymal opacity)?",
    "Is there pulmonary fibrotic sequela?",
    "Is there any consolidation in the lung?",
    "Is there any lung nodule?",
    "Is bronchiectasis present?",
    "Is there peribronchial thickening?",
    "Is there any mosaic attenuation?",
    "Is there any interlobular septal thickening?",
    "Is there any pleural effusion?",
    "Is there any lymphadenopathy in mediastinum or hila?",
    "Is there any hiatal hernia?",
];

/// Noun phrase for each presence question, used for negations and cue phrases.
pub const QS1_NOUNS: [&str; 18] = [
    "medical device",
    "arterial wall calcification",
    "cardiomegaly",
    "pericardial effusion",
    "coronary artery wall calcification",
    "emphysema",
    "atelectasis",
    "lung opacity",
    "pulmonary fibrotic sequela",
    "consolidation",
    "lung nodule",
    "bronchiectasis",
    "peribronchial thickening",
    "mosaic attenuation",
    "interlobular septal thickening",
    "pleural effusion",
    "lymphadenopathy",
    "hiatal hernia",
];

pub const QS2_QUESTIONS: [&str; 8] = [
    "Is there pleural effusion in the right pleural space?",
    "Is there pleural effusion in the left pleural space?",
    "Is there consolidation in the right lung?",
    "Is there consolidation in the left lung?",
    "Is there ground-glass opacity in the right lung?",
    "Is there ground-glass opacity in the left lung?",
    "Is there a lung nodule in the right lung?",
    "Is there a lung nodule in the left lung?",
];

pub const QS3_QUESTIONS: [&str; 15] = [
    "Is there consolidation in the right upper lobe (RUL)?",
    "Is there consolidation in the right middle lobe (RML)?",
    "Is there consolidation in the right lower lobe (RLL)?",
    "Is there consolidation in the left upper lobe (LUL)?",
    "Is there consolidation in the left lower lobe (LLL)?",
    "Is there ground-glass opacity in the right upper lobe (RUL)?",
    "Is there ground-glass opacity in the right middle lobe (RML)?",
    "Is there ground-glass opacity in the right lower lobe (RLL)?",
    "Is there ground-glass opacity in the left upper lobe (LUL)?",
    "Is there ground-glass opacity in the left lower lobe (LLL)?",
    "Is there a lung nodule in the right upper lobe (RUL)?",
    "Is there a lung nodule in the right middle lobe (RML)?",
    "Is there a lung nodule in the right lower lobe (RLL)?",
    "Is there a lung nodule in the left upper lobe (LUL)?",
    "Is there a lung nodule in the left lower lobe (LLL)?",
];

/// Laterality question index for `(kind, side)`.
pub fn qs2_index(kind: FindingKind, side: Side) -> usize {
    let base = match kind {
        FindingKind::PleuralEffusion => 0,
        FindingKind::Consolidation => 2,
        FindingKind::Ggo => 4,
        FindingKind::Nodule => 6,
    };
    base + usize::from(side == Side::Left)
}

pub fn qs2_entry(i: usize) -> (FindingKind, Side) {
    let kind = match i / 2 {
        0 => FindingKind::PleuralEffusion,
        1 => FindingKind::Consolidation,
        2 => FindingKind::Ggo,
        _ => FindingKind::Nodule,
    };
    (kind, if i % 2 == 0 { Side::Right } else { Side::Left })
}

/// Lobar question index for `(kind, lobe)`; effusion has none.
pub fn qs3_index(kind: FindingKind, lobe: Lobe) -> Option<usize> {
    let base = match kind {
        FindingKind::Consolidation => 0,
        FindingKind::Ggo => 5,
        FindingKind::Nodule => 10,
        FindingKind::PleuralEffusion => return None,
    };
    Some(base + lobe.index())
}

pub fn qs3_entry(i: usize) -> (FindingKind, Lobe) {
    let kind = match i / 5 {
        0 => FindingKind::Consolidation,
        1 => FindingKind::Ggo,
        _ => FindingKind::Nodule,
    };
    (kind, Lobe::ALL[i % 5])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QsId {
    #[serde(rename = "QS1")]
    Qs1,
    #[serde(rename = "QS2")]
    Qs2,
    #[serde(rename = "QS3")]
    Qs3,
}

impl QsId {
    pub const ALL: [QsId; 3] = [QsId::Qs1, QsId::Qs2, QsId::Qs3];

    pub fn full_questions(self) -> &'static [&'static str] {
        match self {
            QsId::Qs1 => &QS1_QUESTIONS,
            QsId::Qs2 => &QS2_QUESTIONS,
            QsId::Qs3 => &QS3_QUESTIONS,
        }
    }

    pub fn full_arity(self) -> usize {
        self.full_questions().len()
    }

    pub fn label(self) -> &'static str {
        match self {
            QsId::Qs1 => "QS1",
            QsId::Qs2 => "QS2",
            QsId::Qs3 => "QS3",
        }
    }

    pub fn parse(s: &str) -> Result<QsId> {
        match s.to_ascii_uppercase().as_str() {
            "QS1" => Ok(QsId::Qs1),
            "QS2" => Ok(QsId::Qs2),
            "QS3" => Ok(QsId::Qs3),
            other => Err(Error::Config(format!("unknown question set {other:?}"))),
        }
    }
}

/// An ordered selection of questions from one of the full sets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionSet {
    pub id: QsId,
    /// Ascending indices into the full question table.
    pub indices: Vec<usize>,
}

impl QuestionSet {
    pub fn full(id: QsId) -> Self {
        Self { id, indices: (0..id.full_arity()).collect() }
    }

    pub fn subset(id: QsId, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Config(format!("{} subset is empty", id.label())));
        }
        if let Some(bad) = indices.iter().find(|i| **i >= id.full_arity()) {
            return Err(Error::Config(format!("{} has no question {bad}", id.label())));
        }
        Ok(Self { id, indices })
    }

    /// The presence questions the phantom generator can make positive.
    pub fn toy_qs1() -> Self {
        let mut idx: Vec<usize> = FindingKind::ALL.iter().map(|k| k.qs1_index()).collect();
        idx.sort_unstable();
        Self { id: QsId::Qs1, indices: idx }
    }

    pub fn arity(&self) -> usize {
        self.indices.len()
    }

    pub fn questions(&self) -> Vec<&'static str> {
        let full = self.id.full_questions();
        self.indices.iter().map(|i| full[*i]).collect()
    }

    pub fn position_of(&self, full_index: usize) -> Option<usize> {
        self.indices.binary_search(&full_index).ok()
    }

    /// Restricts a full-width label vector to this subset.
    pub fn project(&self, full: &LabelVector) -> Result<LabelVector> {
        if full.qs != self.id || full.values.len() != self.id.full_arity() {
            return Err(Error::Shape(format!(
                "project expects a full {} vector of length {}, got {:?} of length {}",
                self.id.label(),
                self.id.full_arity(),
                full.qs,
                full.values.len()
            )));
        }
        Ok(LabelVector { qs: self.id, values: self.indices.iter().map(|i| full.values[*i]).collect() })
    }

    /// Short human-readable name of each selected question (for tables).
    pub fn short_names(&self) -> Vec<String> {
        self.indices
            .iter()
            .map(|&i| match self.id {
                QsId::Qs1 => QS1_NOUNS[i].to_string(),
                QsId::Qs2 => {
                    let (k, s) = qs2_entry(i);
                    format!("{} ({})", k.name(), if s == Side::Left { "L" } else { "R" })
                }
                QsId::Qs3 => {
                    let (k, l) = qs3_entry(i);
                    format!("{} ({})", k.name(), l.abbrev())
                }
            })
            .collect()
    }
}

/// Binary answers to a question set, in the set's question order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    pub qs: QsId,
    pub values: Vec<u8>,
}

impl LabelVector {
    pub fn zeros(qs: QsId, len: usize) -> Self {
        Self { qs, values: vec![0; len] }
    }

    pub fn full_zeros(qs: QsId) -> Self {
        Self::zeros(qs, qs.full_arity())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.values[i] != 0
    }

    pub fn check_arity(&self, qs: &QuestionSet) -> Result<()> {
        if self.qs != qs.id || self.values.len() != qs.arity() {
            return Err(Error::Shape(format!(
                "label vector ({:?}, len {}) does not match question set ({:?}, arity {})",
                self.qs,
                self.values.len(),
                qs.id,
                qs.arity()
            )));
        }
        Ok(())
    }
}

/// Checks lobe ⇒ laterality ⇒ presence on full-width label vectors.
pub fn hierarchy_violations(qs1: &LabelVector, qs2: &LabelVector, qs3: &LabelVector) -> Vec<String> {
    let mut out = Vec::new();
    for (i, v) in qs3.values.iter().enumerate() {
        if *v != 0 {
            let (kind, lobe) = qs3_entry(i);
            if qs2.values[qs2_index(kind, lobe.side())] == 0 {
                out.push(format!("{} without {}", QS3_QUESTIONS[i], QS2_QUESTIONS[qs2_index(kind, lobe.side())]));
            }
        }
    }
    for (i, v) in qs2.values.iter().enumerate() {
        if *v != 0 {
            let (kind, _) = qs2_entry(i);
            if qs1.values[kind.qs1_index()] == 0 {
                out.push(format!("{} without {}", QS2_QUESTIONS[i], QS1_QUESTIONS[kind.qs1_index()]));
            }
        }
    }
    out
}

pub fn is_hierarchy_consistent(qs1: &LabelVector, qs2: &LabelVector, qs3: &LabelVector) -> bool {
    hierarchy_violations(qs1, qs2, qs3).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sets_have_paper_arities() {
        assert_eq!(QuestionSet::full(QsId::Qs1).arity(), 18);
        assert_eq!(QuestionSet::full(QsId::Qs2).arity(), 8);
        assert_eq!(QuestionSet::full(QsId::Qs3).arity(), 15);
    }

    #[test]
    fn index_tables_are_bijective() {
        for i in 0..8 {
            let (k, s) = qs2_entry(i);
            assert_eq!(qs2_index(k, s), i);
            assert!(QS2_QUESTIONS[i].contains(k.name().trim_start_matches("lung ")) || k == FindingKind::Nodule);
        }
        for i in 0..15 {
            let (k, l) = qs3_entry(i);
            assert_eq!(qs3_index(k, l), Some(i));
            assert!(QS3_QUESTIONS[i].contains(l.abbrev()));
        }
    }

    #[test]
    fn lobes_are_consistent_with_sides() {
        for side in Side::ALL {
            for lobe in side.lobes() {
                assert_eq!(lobe.side(), side);
            }
        }
    }

    #[test]
    fn toy_subset_projects() {
        let qs = QuestionSet::toy_qs1();
        assert_eq!(qs.indices, vec![7, 9, 10, 15]);
        let mut full = LabelVector::full_zeros(QsId::Qs1);
        full.values[10] = 1;
        let p = qs.project(&full).unwrap();
        assert_eq!(p.values, vec![0, 0, 1, 0]);
        assert!(qs.project(&p).is_err());
    }
}
