//! Per-question agreement metrics.
//!
//! Precision, recall and F1 are 0 when their denominator is 0. Macro averages
//! run over questions with at least one positive reference; questions without
//! positives are still listed, with AUROC absent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::questions::{LabelVector, QsId, QuestionSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pred: impl IntoIterator<Item = u8>, gt: impl IntoIterator<Item = u8>) -> Self {
        let mut c = Confusion::default();
        for (p, g) in pred.into_iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, ties
/// contributing one half. `None` when either class is empty.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| **l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            if labels[idx[k]] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub question: String,
    pub short_name: String,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub qs: QsId,
    pub rows: Vec<QuestionMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auroc: Option<f64>,
    pub samples: usize,
    /// Lexical scores, filled by report-level evaluation.
    pub bleu_mean: Option<f64>,
    /// Reserved for externally computed METEOR.
    pub meteor: Option<f64>,
    /// Reserved for externally computed CRG.
    pub crg: Option<f64>,
}

impl MetricsReport {
    /// One JSON object per question, in question-set order.
    pub fn jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "question": r.question,
                    "precision": r.precision,
                    "recall": r.recall,
                    "f1": r.f1,
                    "auroc": r.auroc,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }

    pub fn row(&self, question: &str) -> Option<&QuestionMetrics> {
        self.rows.iter().find(|r| r.question == question)
    }
}

/// Metrics of `preds` against `gts` (both in `qs` order); optional scores enable AUROC.
pub fn metrics_from_labels(qs: &QuestionSet, preds: &[LabelVector], gts: &[LabelVector], scores: Option<&[Vec<f64>]>) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Alignment(format!("{} predictions vs {} references", preds.len(), gts.len())));
    }
    for l in preds.iter().chain(gts) {
        l.check_arity(qs)?;
    }
    let names = qs.questions();
    let shorts = qs.short_names();
    let mut rows = Vec::with_capacity(qs.arity());
    for k in 0..qs.arity() {
        let gt_col: Vec<u8> = gts.iter().map(|g| g.values[k]).collect();
        let c = Confusion::from_pairs(preds.iter().map(|p| p.values[k]), gt_col.iter().copied());
        let au = scores.and_then(|s| {
            let col: Vec<f64> = s.iter().map(|r| r[k]).collect();
            auroc(&col, &gt_col)
        });
        rows.push(QuestionMetrics {
            question: names[k].to_string(),
            short_name: shorts[k].clone(),
            confusion: c,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            auroc: au,
            support: c.tp + c.fn_,
        });
    }
    let counted: Vec<&QuestionMetrics> = rows.iter().filter(|r| r.support > 0).collect();
    let mean = |f: &dyn Fn(&QuestionMetrics) -> f64| {
        if counted.is_empty() {
            0.0
        } else {
            counted.iter().map(|r| f(r)).sum::<f64>() / counted.len() as f64
        }
    };
    let aurocs: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    Ok(MetricsReport {
        qs: qs.id,
        macro_precision: mean(&|r| r.precision),
        macro_recall: mean(&|r| r.recall),
        macro_f1: mean(&|r| r.f1),
        macro_auroc: (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64),
        rows,
        samples: gts.len(),
        bleu_mean: None,
        meteor: None,
        crg: None,
    })
}

/// Sample mean and unbiased standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 values for a spread, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((m, v.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let c = Confusion::from_pairs([1, 1, 0, 0], [1, 0, 1, 0]);
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.5, 0.5, 0.5));
        assert_eq!(Confusion::from_pairs([0, 0], [0, 0]).f1(), 0.0);
    }

    #[test]
    fn auroc_ranks_and_ties() {
        assert_eq!(auroc(&[0.1, 0.9, 0.8, 0.2], &[0, 1, 1, 0]), Some(1.0));
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]), Some(0.5));
        assert_eq!(auroc(&[0.5, 0.7], &[0, 0]), None);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.3, 0.5]).unwrap();
        assert!((m - 0.4).abs() < 1e-12);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(mean_std(&[1.0]).is_err());
    }
}
