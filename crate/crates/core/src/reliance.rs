//! Attention reliance scores: how much of the generation-time attention lands
//! on cue tokens versus image tokens.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalproto::metrics::mean_std;

const TRACE_MAGIC: &[u8; 8] = b"DCPPDTRC";

/// Per-step attention over the `prompt_len` prompt positions, plus the region
/// index sets. Each row sums to 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub prompt_len: usize,
    pub image: Vec<usize>,
    pub text: Vec<usize>,
    pub query: Vec<usize>,
    #[serde(skip)]
    pub rows: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.prompt_len];
        for &i in self.image.iter().chain(&self.text).chain(&self.query) {
            if i >= self.prompt_len || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invariant(format!("region position {i} is out of range or shared between regions")));
            }
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != self.prompt_len {
                return Err(Error::Shape(format!("trace step {t} has {} entries, prompt has {}", row.len(), self.prompt_len)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Invariant(format!("trace step {t} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Binary layout: magic, u32 header length, JSON header, then `T × S` f32 little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "steps": self.rows.len(),
            "prompt_len": self.prompt_len,
            "image": self.image,
            "text": self.text,
            "query": self.query,
        });
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + h.len() + 4 * self.rows.len() * self.prompt_len);
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        for row in &self.rows {
            for v in row {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("trace file: {m}"));
        if bytes.len() < 12 || &bytes[..8] != TRACE_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12 + hlen;
        if hend > bytes.len() {
            return Err(bad("truncated header"));
        }
        #[derive(Deserialize)]
        struct Header {
            steps: usize,
            prompt_len: usize,
            image: Vec<usize>,
            text: Vec<usize>,
            query: Vec<usize>,
        }
        let h: Header = serde_json::from_slice(&bytes[12..hend])?;
        let body = &bytes[hend..];
        if body.len() != 4 * h.steps * h.prompt_len {
            return Err(bad("payload size does not match the header"));
        }
        let vals: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let rows = if h.prompt_len == 0 { vec![Vec::new(); h.steps] } else { vals.chunks(h.prompt_len).map(|c| c.to_vec()).collect() };
        Ok(Self { prompt_len: h.prompt_len, image: h.image, text: h.text, query: h.query, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::File::create(path)?.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?)
    }
}

/// `(1/T) Σ_t (1/|R|) Σ_{i∈R} a_t(i)`.
pub fn region_mass(trace: &AttentionTrace, region: &[usize]) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::UndefinedRegion("region has no positions".into()));
    }
    if trace.rows.is_empty() {
        return Err(Error::UndefinedRegion("trace has no steps".into()));
    }
    let mut total = 0.0;
    for row in &trace.rows {
        let mut s = 0.0;
        for &i in region {
            s += *row.get(i).ok_or_else(|| Error::UndefinedRegion(format!("position {i} outside the prompt")))?;
        }
        total += s / region.len() as f64;
    }
    Ok(total / trace.rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelianceResult {
    pub m_text: f64,
    pub m_image: f64,
    pub s_text: f64,
    pub s_image: f64,
}

pub fn reliance_scores(m_text: f64, m_image: f64) -> Result<RelianceResult> {
    let denom = m_text + m_image;
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateTrace);
    }
    let s_text = m_text / denom;
    Ok(RelianceResult { m_text, m_image, s_text, s_image: 1.0 - s_text })
}

pub fn trace_reliance(trace: &AttentionTrace) -> Result<RelianceResult> {
    reliance_scores(region_mass(trace, &trace.text)?, region_mass(trace, &trace.image)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelianceSummary {
    pub n: usize,
    pub mean_s_text: f64,
    pub std_s_text: f64,
}

/// Sample mean and unbiased standard deviation of `S_text` over traces.
pub fn reliance_report(traces: &[AttentionTrace]) -> Result<RelianceSummary> {
    let scores: Vec<f64> = traces.iter().map(|t| trace_reliance(t).map(|r| r.s_text)).collect::<Result<_>>()?;
    summarize(&scores)
}

pub fn summarize(s_text: &[f64]) -> Result<RelianceSummary> {
    let (mean_s_text, std_s_text) = mean_std(s_text)?;
    Ok(RelianceSummary { n: s_text.len(), mean_s_text, std_s_text })
}

/// `setting,mean_S_text,std_S_text` rows, one per setting.
pub fn summary_csv(rows: &[(String, RelianceSummary)]) -> String {
    let mut out = String::from("setting,mean_S_text,std_S_text,n\n");
    for (name, s) in rows {
        out.push_str(&format!("{name},{:.6},{:.6},{}\n", s.mean_s_text, s.std_s_text, s.n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(rows: Vec<Vec<f64>>, image: Vec<usize>, text: Vec<usize>) -> AttentionTrace {
        let s = rows[0].len();
        let used: Vec<usize> = image.iter().chain(&text).copied().collect();
        let query = (0..s).filter(|i| !used.contains(i)).collect();
        AttentionTrace { prompt_len: s, image, text, query, rows }
    }

    #[test]
    fn uniform_and_point_mass() {
        let t = trace(vec![vec![0.25; 4]; 3], vec![0, 1], vec![2]);
        assert!((region_mass(&t, &[0, 1]).unwrap() - 0.25).abs() < 1e-15);
        assert!((region_mass(&t, &[2]).unwrap() - 0.25).abs() < 1e-15);
        let p = trace(vec![vec![0.0, 1.0, 0.0, 0.0]], vec![0, 1], vec![2, 3]);
        assert_eq!(region_mass(&p, &[0, 1]).unwrap(), 0.5);
        assert!(matches!(region_mass(&p, &[]), Err(Error::UndefinedRegion(_))));
    }

    #[test]
    fn score_arithmetic() {
        let r = reliance_scores(0.2, 0.3).unwrap();
        assert!((r.s_text - 0.4).abs() < 1e-12 && (r.s_image - 0.6).abs() < 1e-12);
        assert_eq!(reliance_scores(0.7, 0.7).unwrap().s_text, 0.5);
        assert!(matches!(reliance_scores(0.0, 0.0), Err(Error::DegenerateTrace)));
    }

    #[test]
    fn report_spread() {
        let s = summarize(&[0.3, 0.5]).unwrap();
        assert!((s.mean_s_text - 0.4).abs() < 1e-12);
        assert!((s.std_s_text - 0.02f64.sqrt()).abs() < 1e-12);
        let t = trace(vec![vec![0.5, 0.3, 0.2]], vec![0], vec![1]);
        let same = reliance_report(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(same.std_s_text, 0.0);
        assert!(matches!(reliance_report(&[t]), Err(Error::InsufficientData(_))));
        let csv = summary_csv(&[("p0".into(), same)]);
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn file_round_trip() {
        let t = trace(vec![vec![0.5, 0.25, 0.25], vec![0.1, 0.1, 0.8]], vec![0], vec![1]);
        let back = AttentionTrace::decode(&t.encode().unwrap()).unwrap();
        assert_eq!((back.image.clone(), back.text.clone(), back.query.clone()), (t.image.clone(), t.text.clone(), t.query.clone()));
        back.validate().unwrap();
        assert!((back.rows[1][2] - 0.8).abs() < 1e-7);
    }

    fn random_trace() -> impl Strategy<Value = AttentionTrace> {
        (3usize..12, 1usize..6).prop_flat_map(|(s, t)| {
            (Just(s), prop::collection::vec(prop::collection::vec(0.001f64..1.0, s), t), 1usize..s)
        })
        .prop_flat_map(|(s, raw, split)| (Just(s), Just(raw), Just(split), 0usize..=(s - split)))
        .prop_map(|(s, raw, split, qlen)| {
            let rows = raw.into_iter().map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|v| v / z).collect()
            }).collect();
            let text_end = (split + (s - split - qlen).max(1)).min(s);
            AttentionTrace {
                prompt_len: s,
                image: (0..split).collect(),
                text: (split..text_end).collect(),
                query: (text_end..s).collect(),
                rows,
            }
        })
    }

    proptest! {
        #[test]
        fn mass_matches_double_loop(t in random_trace()) {
            let mut brute = 0.0;
            for row in &t.rows {
                let mut acc = 0.0;
                for &i in &t.image {
                    acc += row[i];
                }
                brute += acc / t.image.len() as f64;
            }
            brute /= t.rows.len() as f64;
            prop_assert!((region_mass(&t, &t.image).unwrap() - brute).abs() < 1e-9);
        }

        #[test]
        fn scores_sum_to_one_and_ignore_order(t in random_trace(), k in 0.01f64..100.0) {
            let r = trace_reliance(&t).unwrap();
            prop_assert_eq!(r.s_text + r.s_image, 1.0);
            let scaled = reliance_scores(r.m_text * k, r.m_image * k).unwrap();
            prop_assert!((scaled.s_text - r.s_text).abs() < 1e-12);
            let mut rev = t.image.clone();
            rev.reverse();
            prop_assert!((region_mass(&t, &rev).unwrap() - r.m_image).abs() < 1e-12);
        }
    }
}
