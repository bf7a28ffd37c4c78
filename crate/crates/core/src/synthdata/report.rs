//! Template grammar for structured reports.
//!
//! Every sentence is one of a handful of fixed shapes so the rule extractor
//! can invert rendering exactly:
//!
//! ```text
//! positive  "{Subject} is present in the {loc}."   "There is {noun} in the {loc}."   "{Subject} is seen in the {loc}."
//! negation  "No {name}."                           "There is no {name}."             "No {name} is seen."
//! ```
//!
//! Sections appear in [`SECTIONS`] order and only when non-empty.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ReportOptions;
use super::phantom::{FindingSpec, GroundTruth};
use crate::error::Result;
use crate::questions::{FindingKind, QS1_NOUNS};
use crate::rng::{stream, streams};

pub const SECTIONS: [&str; 7] = ["Lungs", "Pleura", "Heart", "Vessels", "Mediastinum", "Abdomen", "Devices"];
pub const UNSTRUCTURED_SECTION: &str = "Findings";

/// Section each presence question is reported under.
pub fn qs1_section(i: usize) -> &'static str {
    match i {
        0 => "Devices",
        1 => "Vessels",
        2..=4 => "Heart",
        15 => "Pleura",
        16 => "Mediastinum",
        17 => "Abdomen",
        _ => "Lungs",
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub sections: Vec<Section>,
    pub flat_text: String,
}

impl StructuredReport {
    pub fn from_sections(sections: Vec<Section>) -> Self {
        let flat_text = sections
            .iter()
            .map(|s| format!("{}: {}", s.name, s.sentences.join(" ")))
            .collect::<Vec<_>>()
            .join(" ");
        Self { sections, flat_text }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().flat_map(|s| s.sentences.iter().map(String::as_str))
    }
}

pub fn positive_sentence(kind: FindingKind, loc: Option<&str>, style: usize) -> String {
    let tail = loc.map(|l| format!(" in the {l}")).unwrap_or_default();
    match style {
        0 => format!("{} is present{tail}.", kind.subject()),
        1 => format!("There is {}{tail}.", kind.noun()),
        _ => format!("{} is seen{tail}.", kind.subject()),
    }
}

pub fn negation_sentence(qs1_index: usize, style: usize) -> String {
    let name = QS1_NOUNS[qs1_index];
    match style {
        0 => format!("No {name}."),
        1 => format!("There is no {name}."),
        _ => format!("No {name} is seen."),
    }
}

pub fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn finding_sentence(f: &FindingSpec, style: usize) -> String {
    let loc = match f.lobe {
        Some(l) => l.phrase(),
        None => f.laterality.phrase_for(f.kind),
    };
    positive_sentence(f.kind, Some(loc), style)
}

/// Renders `gt` into sectioned text. The style seed picks one phrasing for the
/// whole report (and, for unstructured reports, the sentence order).
pub fn render_report(gt: &GroundTruth, style_seed: u64, opts: &ReportOptions) -> Result<StructuredReport> {
    gt.check()?;
    let mut rng = stream(style_seed, streams::STYLE);
    let style = rng.random_range(0..opts.style_variants.max(1));
    let mut per_section: Vec<Vec<String>> = vec![Vec::new(); SECTIONS.len()];
    let mut qs1_order: Vec<usize> = (0..QS1_NOUNS.len()).collect();
    qs1_order.sort_by_key(|i| SECTIONS.iter().position(|s| *s == qs1_section(*i)).unwrap());
    for i in qs1_order {
        let sec = SECTIONS.iter().position(|s| *s == qs1_section(i)).unwrap();
        match FindingKind::from_qs1_index(i) {
            Some(kind) if gt.qs1.is_positive(i) => {
                for f in gt.findings.iter().filter(|f| f.kind == kind) {
                    per_section[sec].push(finding_sentence(f, style));
                }
            }
            _ if gt.qs1.is_positive(i) => {
                per_section[sec].push(format!("{} is present.", capitalize(QS1_NOUNS[i])));
            }
            _ if opts.negated_qs1.contains(&i) => per_section[sec].push(negation_sentence(i, style)),
            _ => {}
        }
    }
    let sections = if opts.structured {
        SECTIONS
            .iter()
            .zip(per_section)
            .filter(|(_, s)| !s.is_empty())
            .map(|(n, s)| Section { name: n.to_string(), sentences: s })
            .collect()
    } else {
        let mut all: Vec<String> = per_section.into_iter().flatten().collect();
        all.shuffle(&mut rng);
        vec![Section { name: UNSTRUCTURED_SECTION.to_string(), sentences: all }]
    };
    Ok(StructuredReport::from_sections(sections))
}
