//! Corpus-free sentence BLEU: clipped n-gram precision with the standard
//! brevity penalty. A zero n-gram precision makes that BLEU-n zero (no
//! smoothing). BLEU-n uses the geometric mean of precisions 1..=n.

use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// BLEU-1 .. BLEU-4.
    pub bleu: [f64; 4],
    pub mean: f64,
    /// Set when the candidate was empty.
    pub empty_candidate: bool,
}

fn ngrams<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped precision `(matches, total)` of candidate n-grams.
pub fn clipped_precision(cand: &[&str], refr: &[&str], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(refr, n);
    let matches = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

pub fn bleu(candidate: &[&str], reference: &[&str]) -> BleuScore {
    if candidate.is_empty() {
        log::warn!("BLEU of an empty candidate is 0");
        return BleuScore { bleu: [0.0; 4], mean: 0.0, empty_candidate: true };
    }
    let bp = brevity_penalty(candidate.len(), reference.len());
    let mut logs = [0.0; 4];
    let mut out = [0.0; 4];
    let mut zero = false;
    for n in 1..=4 {
        let (m, t) = clipped_precision(candidate, reference, n);
        if m == 0 || t == 0 {
            zero = true;
        } else {
            logs[n - 1] = (m as f64 / t as f64).ln();
        }
        out[n - 1] = if zero { 0.0 } else { bp * (logs[..n].iter().sum::<f64>() / n as f64).exp() };
    }
    BleuScore { bleu: out, mean: out.iter().sum::<f64>() / 4.0, empty_candidate: false }
}

/// Mean of BLEU-1..4 on whitespace-tokenized texts.
pub fn bleu_mean(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    bleu(&c, &r).mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_disjoint() {
        assert!((bleu_mean("a b c d e", "a b c d e") - 1.0).abs() < 1e-12);
        assert_eq!(bleu_mean("x y z w", "a b c d"), 0.0);
        assert!(bleu(&[], &["a"]).empty_candidate);
    }

    #[test]
    fn clipping() {
        assert_eq!(clipped_precision(&["the", "the", "the"], &["the", "cat"], 1), (1, 3));
    }
}
