//! Reference answers parsed once per report and keyed by extractor fingerprint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::extract::parse_report;
use crate::error::{Error, Result};
use crate::questions::{LabelVector, QsId, QuestionSet};

pub const EXTRACTOR_VERSION: &str = "rule-v1";

/// Extractor version plus a hash of the question sets it answers.
pub fn fingerprint(sets: &[QuestionSet]) -> String {
    let mut h = Sha256::new();
    h.update(EXTRACTOR_VERSION.as_bytes());
    for qs in sets {
        for q in qs.questions() {
            h.update(q.as_bytes());
            h.update([0]);
        }
        h.update([1]);
    }
    format!("{EXTRACTOR_VERSION}:{}", &hex::encode(h.finalize())[..16])
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct AnswerCache {
    pub fingerprint: String,
    pub entries: BTreeMap<String, [LabelVector; 3]>,
    #[serde(skip)]
    parses: AtomicUsize,
}

impl AnswerCache {
    pub fn new(fingerprint: String) -> Self {
        Self { fingerprint, entries: BTreeMap::new(), parses: AtomicUsize::new(0) }
    }

    /// Number of reference parses performed through this cache object.
    pub fn parses(&self) -> usize {
        self.parses.load(Ordering::Relaxed)
    }

    /// Full-width answers for a reference report, parsing it on a miss.
    pub fn get_or_parse(&mut self, id: &str, report: &str) -> Result<&[LabelVector; 3]> {
        if !self.entries.contains_key(id) {
            let e = parse_report(report, true)?;
            self.parses.fetch_add(1, Ordering::Relaxed);
            self.entries.insert(id.to_string(), [e.qs1, e.qs2, e.qs3]);
        }
        Ok(&self.entries[id])
    }

    pub fn answers(&mut self, id: &str, report: &str, qs: &QuestionSet) -> Result<LabelVector> {
        let full = self.get_or_parse(id, report)?;
        let idx = QsId::ALL.iter().position(|q| *q == qs.id).unwrap();
        qs.project(&full[idx])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads a cache; a fingerprint mismatch yields an empty cache rather than stale answers.
    pub fn load_or_new(path: &Path, fingerprint: &str) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => {
                let c: AnswerCache = serde_json::from_slice(&bytes)?;
                if c.fingerprint == fingerprint {
                    Ok(c)
                } else {
                    log::info!("answer cache fingerprint changed; reparsing references");
                    Ok(Self::new(fingerprint.to_string()))
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(fingerprint.to_string())),
            Err(e) => Err(Error::Io(format!("{}: {e}", path.display()))),
        }
    }
}
