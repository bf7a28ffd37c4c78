//! Dataset generation and the on-disk layout.
//!
//! ```text
//! <dir>/manifest.json              config echo, seed, item ids and seeds, class distribution
//! <dir>/class_distribution.csv     set,question,pos,neg
//! <dir>/volumes/<id>.vol           volume file (below)
//! <dir>/labels/<id>.json           {"qs1": {question: 0|1, ..}, "qs2": .., "qs3": ..}
//! <dir>/reports/<id>.json          {"sections": [{"name", "sentences"}], "flat_text"}
//! ```
//!
//! Volume files are `b"DCPPDVOL"`, then `u32` rank (4), four `u32` extents
//! `[channels, H, W, D]`, then float32 samples, all little-endian, channel-major
//! with `z` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::DatasetConfig;
use super::phantom::{generate_ground_truth, generate_phantom, GroundTruth, PhantomVolume};
use super::report::{render_report, StructuredReport};
use crate::error::{Error, Result};
use crate::questions::{LabelVector, QsId};
use crate::rng::{derive, streams};

pub const VOLUME_MAGIC: &[u8; 8] = b"DCPPDVOL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub gt: GroundTruth,
    pub report: StructuredReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

pub fn item_id(index: usize) -> String {
    format!("{index:05}")
}

pub fn item_seed(seed: u64, index: usize) -> u64 {
    derive(seed, index as u64)
}

pub fn style_seed(item_seed: u64) -> u64 {
    derive(item_seed, streams::STYLE)
}

/// Builds labels and reports for `n` items. Volumes are regenerated on demand
/// with [`Dataset::volume`] since they dominate memory.
pub fn make_dataset(n: usize, seed: u64, config: &DatasetConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("a dataset needs at least one item".into()));
    }
    config.validate()?;
    let samples = (0..n)
        .map(|i| {
            let s = item_seed(seed, i);
            let gt = generate_ground_truth(s, config)?;
            let report = render_report(&gt, style_seed(s), &config.report)?;
            Ok(Sample { id: item_id(i), seed: s, gt, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { seed, config: config.clone(), samples })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub set: QsId,
    pub question: String,
    pub pos: usize,
    pub neg: usize,
}

pub fn class_distribution<'a>(labels: impl IntoIterator<Item = &'a GroundTruth>) -> Vec<ClassCount> {
    let gts: Vec<&GroundTruth> = labels.into_iter().collect();
    let mut out = Vec::new();
    for qs in QsId::ALL {
        for (i, q) in qs.full_questions().iter().enumerate() {
            let pos = gts.iter().filter(|g| g.labels(qs).is_positive(i)).count();
            out.push(ClassCount { set: qs, question: q.to_string(), pos, neg: gts.len() - pos });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub items: Vec<ManifestItem>,
    pub class_distribution: Vec<ClassCount>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub seed: u64,
}

fn labels_json(gt: &GroundTruth) -> Value {
    let mut root = Map::new();
    for qs in QsId::ALL {
        let mut m = Map::new();
        for (q, v) in qs.full_questions().iter().zip(&gt.labels(qs).values) {
            m.insert(q.to_string(), Value::from(*v));
        }
        root.insert(qs.label().to_ascii_lowercase(), Value::Object(m));
    }
    Value::Object(root)
}

fn labels_from_json(v: &Value) -> Result<[LabelVector; 3]> {
    let read = |qs: QsId| -> Result<LabelVector> {
        let m = v
            .get(qs.label().to_ascii_lowercase())
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Format(format!("labels file lacks {}", qs.label())))?;
        let values = qs
            .full_questions()
            .iter()
            .map(|q| {
                m.get(*q)
                    .and_then(Value::as_u64)
                    .filter(|x| *x <= 1)
                    .map(|x| x as u8)
                    .ok_or_else(|| Error::Format(format!("labels file lacks a 0/1 answer for {q:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelVector { qs, values })
    };
    Ok([read(QsId::Qs1)?, read(QsId::Qs2)?, read(QsId::Qs3)?])
}

pub fn encode_volume(v: &PhantomVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + v.data.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in [v.channels, v.dims[0], v.dims[1], v.dims[2]] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &v.data {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], channel_descriptors: Vec<String>, spacing: f64) -> Result<PhantomVolume> {
    let bad = |m: &str| Error::Format(format!("volume file: {m}"));
    if bytes.len() < 28 || &bytes[..8] != VOLUME_MAGIC {
        return Err(bad("bad magic"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if u(8) != 4 {
        return Err(bad("rank must be 4"));
    }
    let (c, h, w, d) = (u(12), u(16), u(20), u(24));
    let n = c * h * w * d;
    if bytes.len() != 28 + 4 * n {
        return Err(bad("payload length does not match the shape header"));
    }
    let data = bytes[28..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(PhantomVolume { channels: c, dims: [h, w, d], data, spacing, channel_descriptors })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn volume(&self, i: usize) -> Result<PhantomVolume> {
        Ok(generate_phantom(self.samples[i].seed, &self.config)?.0)
    }

    pub fn class_distribution(&self) -> Vec<ClassCount> {
        class_distribution(self.samples.iter().map(|s| &s.gt))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_with(dir, true)
    }

    /// Like [`Dataset::write`]; with `volumes = false` only labels, reports and the
    /// manifest are stored and volumes are regenerated from the item seeds on load.
    pub fn write_with(&self, dir: &Path, volumes: bool) -> Result<()> {
        let subs: &[&str] = if volumes { &["volumes", "labels", "reports"] } else { &["labels", "reports"] };
        for sub in subs {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::Io(format!("{}: {e}", dir.join(sub).display())))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            if volumes {
                let vol = self.volume(i)?;
                fs::write(dir.join("volumes").join(format!("{}.vol", s.id)), encode_volume(&vol))?;
            }
            fs::write(dir.join("labels").join(format!("{}.json", s.id)), serde_json::to_vec_pretty(&labels_json(&s.gt))?)?;
            fs::write(dir.join("reports").join(format!("{}.json", s.id)), serde_json::to_vec_pretty(&s.report)?)?;
        }
        let dist = self.class_distribution();
        let mut csv = String::from("set,question,pos,neg\n");
        for c in &dist {
            csv.push_str(&format!("{},\"{}\",{},{}\n", c.set.label(), c.question, c.pos, c.neg));
        }
        fs::write(dir.join("class_distribution.csv"), csv)?;
        let manifest = Manifest {
            format_version: 1,
            seed: self.seed,
            config: self.config.clone(),
            items: self.samples.iter().map(|s| ManifestItem { id: s.id.clone(), seed: s.seed }).collect(),
            class_distribution: dist,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads labels and reports; findings geometry is recovered from the item seeds.
    pub fn read(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let bytes = fs::read(&mpath).map_err(|e| Error::Io(format!("{}: {e}", mpath.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let mut samples = Vec::with_capacity(manifest.items.len());
        for item in &manifest.items {
            let labels: Value = serde_json::from_slice(&fs::read(dir.join("labels").join(format!("{}.json", item.id)))?)?;
            let [qs1, qs2, qs3] = labels_from_json(&labels)?;
            let report: StructuredReport =
                serde_json::from_slice(&fs::read(dir.join("reports").join(format!("{}.json", item.id)))?)?;
            let gt = generate_ground_truth(item.seed, &manifest.config)?;
            if gt.qs1 != qs1 || gt.qs2 != qs2 || gt.qs3 != qs3 {
                return Err(Error::Format(format!("labels for item {} disagree with its seed", item.id)));
            }
            samples.push(Sample { id: item.id.clone(), seed: item.seed, gt, report });
        }
        Ok(Dataset { seed: manifest.seed, config: manifest.config, samples })
    }

    pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
        dir.join("volumes").join(format!("{id}.vol"))
    }

    pub fn read_volume(&self, dir: &Path, i: usize) -> Result<PhantomVolume> {
        let p = Self::volume_path(dir, &self.samples[i].id);
        let bytes = fs::read(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        let names = self.config.windows.iter().map(|w| w.name.clone()).collect();
        decode_volume(&bytes, names, self.config.spacing)
    }
}
