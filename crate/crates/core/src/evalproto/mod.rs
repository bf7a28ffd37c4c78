//! Question-set evaluation: answer extraction, cached references, agreement
//! metrics, hierarchy analysis and BLEU.

pub mod bleu;
pub mod cache;
pub mod extract;
pub mod metrics;
pub mod qa_client;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::questions::{is_hierarchy_consistent, qs2_index, qs3_index, FindingKind, LabelVector, Lobe, QsId, QuestionSet, Side};
use cache::AnswerCache;
use extract::parse_report;
use metrics::{metrics_from_labels, MetricsReport};
use qa_client::QaClient;

pub enum Extractor<'a> {
    Rule,
    Remote(&'a QaClient),
}

/// Answers every question of `qs` from report text.
pub fn extract_answers(report: &str, qs: &QuestionSet, extractor: &Extractor) -> Result<LabelVector> {
    match extractor {
        Extractor::Rule => parse_report(report, true)?.answers(qs),
        Extractor::Remote(client) => {
            let values = qs.questions().iter().map(|q| client.ask(report, q).map(u8::from)).collect::<Result<Vec<_>>>()?;
            Ok(LabelVector { qs: qs.id, values })
        }
    }
}

/// A report tagged with the sample it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdReport {
    pub id: String,
    pub text: String,
}

/// Full-width answers extracted from generated text, tolerant of broken sentences.
#[derive(Clone, Debug)]
pub struct GeneratedAnswers {
    pub id: String,
    pub labels: [LabelVector; 3],
    pub failures: usize,
}

pub fn extract_generated(reports: &[IdReport]) -> Vec<GeneratedAnswers> {
    reports
        .iter()
        .map(|r| {
            let e = parse_report(&r.text, false).expect("lenient parsing does not fail");
            GeneratedAnswers { id: r.id.clone(), failures: e.failures.len(), labels: [e.qs1, e.qs2, e.qs3] }
        })
        .collect()
}

fn set_index(qs: QsId) -> usize {
    QsId::ALL.iter().position(|q| *q == qs).unwrap()
}

/// Agreement of generated reports with reference reports under one question set.
pub fn agreement_metrics(pred: &[IdReport], refs: &[IdReport], qs: &QuestionSet, cache: &mut AnswerCache) -> Result<MetricsReport> {
    if pred.len() != refs.len() {
        return Err(Error::Alignment(format!("{} generated vs {} reference reports", pred.len(), refs.len())));
    }
    let generated = extract_generated(pred);
    let mut p = Vec::with_capacity(pred.len());
    let mut g = Vec::with_capacity(pred.len());
    for (gen, r) in generated.iter().zip(refs) {
        if gen.id != r.id {
            return Err(Error::Alignment(format!("generated report {} paired with reference {}", gen.id, r.id)));
        }
        p.push(qs.project(&gen.labels[set_index(qs.id)])?);
        g.push(cache.answers(&r.id, &r.text, qs)?);
    }
    metrics_from_labels(qs, &p, &g, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingLevels {
    pub finding: String,
    /// Mean F1 of this finding's questions at the presence, laterality and lobe level.
    pub f1: [Option<f64>; 3],
    /// `f1[1] − f1[0]` and `f1[2] − f1[1]`.
    pub deltas: [Option<f64>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub findings: Vec<FindingLevels>,
    pub consistency_rate: f64,
    pub inconsistent_ids: Vec<String>,
}

fn mean_f1(m: &MetricsReport, questions: &[usize]) -> Option<f64> {
    let full = m.qs.full_questions();
    let f: Vec<f64> = questions
        .iter()
        .filter_map(|i| m.row(full[*i]))
        .filter(|r| r.support > 0)
        .map(|r| r.f1)
        .collect();
    (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
}

/// Per-finding F1 across the three levels and the consistency rate of generated answers.
pub fn hierarchy_analysis(m1: &MetricsReport, m2: &MetricsReport, m3: &MetricsReport, generated: &[GeneratedAnswers]) -> HierarchyReport {
    let findings = FindingKind::ALL
        .iter()
        .map(|k| {
            let l1 = mean_f1(m1, &[k.qs1_index()]);
            let l2 = mean_f1(m2, &Side::ALL.map(|s| qs2_index(*k, s)));
            let lobes: Vec<usize> = Lobe::ALL.iter().filter_map(|l| qs3_index(*k, *l)).collect();
            let l3 = mean_f1(m3, &lobes);
            let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
            FindingLevels { finding: k.name().to_string(), f1: [l1, l2, l3], deltas: [d(l1, l2), d(l2, l3)] }
        })
        .collect();
    let inconsistent_ids: Vec<String> = generated
        .iter()
        .filter(|g| !is_hierarchy_consistent(&g.labels[0], &g.labels[1], &g.labels[2]))
        .map(|g| g.id.clone())
        .collect();
    let consistency_rate =
        if generated.is_empty() { 1.0 } else { 1.0 - inconsistent_ids.len() as f64 / generated.len() as f64 };
    HierarchyReport { findings, consistency_rate, inconsistent_ids }
}
