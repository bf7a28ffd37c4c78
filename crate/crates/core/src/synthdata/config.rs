use serde::{Deserialize, Serialize};

use super::phantom::Window;
use crate::error::{Error, Result};
use crate::questions::{FindingKind, Lobe, QsId, QuestionSet, Side};

/// A finding placed unconditionally; unset fields are drawn as usual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedFinding {
    pub kind: FindingKind,
    pub laterality: Side,
    #[serde(default)]
    pub lobe: Option<Lobe>,
    #[serde(default)]
    pub extent: Option<usize>,
    #[serde(default)]
    pub intensity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    /// Presence questions that get an explicit negation when absent.
    pub negated_qs1: Vec<usize>,
    /// Number of synonym phrasings a style seed chooses between (1..=3).
    pub style_variants: usize,
    /// `false` shuffles sentences into a single section.
    pub structured: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { negated_qs1: QuestionSet::toy_qs1().indices, style_variants: 3, structured: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub grid: [usize; 3],
    pub spacing: f64,
    pub windows: Vec<Window>,
    /// Per-kind probability, indexed by [`FindingKind::index`].
    pub prevalence: [f64; 4],
    /// Probability that a lung finding is assigned a lobe.
    pub lobe_rate: f64,
    /// Inclusive voxel-radius range per kind.
    pub extent: [[usize; 2]; 4],
    /// Blob peak added to the latent density per kind, before intensity scaling.
    pub density: [f64; 4],
    pub intensity: [f64; 2],
    pub background: f64,
    pub noise_std: f64,
    pub forced: Vec<ForcedFinding>,
    pub report: ReportOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            grid: [32, 32, 32],
            spacing: 1.0,
            windows: vec![Window::new("lung", 0.0, 0.45), Window::new("soft", 0.3, 0.75), Window::new("dense", 0.6, 1.0)],
            prevalence: [0.25; 4],
            lobe_rate: 1.0,
            extent: [[2, 3], [4, 4], [4, 4], [4, 4]],
            density: [0.9, 0.55, 0.4, 0.7],
            intensity: [0.9, 1.0],
            background: 0.1,
            noise_std: 0.02,
            forced: Vec::new(),
            report: ReportOptions::default(),
        }
    }
}

impl DatasetConfig {
    /// Grid and window count of the production setting (not a test target).
    pub fn paper_geometry() -> Self {
        let windows = (0..11)
            .map(|i| {
                let lo = i as f64 * 0.08;
                Window::new(&format!("w{i}"), lo, lo + 0.2)
            })
            .collect();
        Self { grid: [256, 256, 256], windows, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in FindingKind::ALL.iter().zip(self.prevalence) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("prevalence {p} for {k:?} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.lobe_rate) {
            return Err(Error::Config(format!("lobe rate {} outside [0, 1]", self.lobe_rate)));
        }
        for (k, [lo, hi]) in FindingKind::ALL.iter().zip(self.extent) {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("extent range [{lo}, {hi}] for {k:?} is invalid")));
            }
        }
        let [ilo, ihi] = self.intensity;
        if !(ilo > 0.0 && ilo <= ihi && ihi <= 1.0) {
            return Err(Error::Config(format!("intensity range [{ilo}, {ihi}] must lie in (0, 1]")));
        }
        if self.windows.is_empty() {
            return Err(Error::Config("at least one window is required".into()));
        }
        if self.grid.iter().any(|d| *d < 6) {
            return Err(Error::Config(format!("grid {:?} is too small", self.grid)));
        }
        if !(1..=3).contains(&self.report.style_variants) {
            return Err(Error::Config("style_variants must be 1, 2 or 3".into()));
        }
        if let Some(i) = self.report.negated_qs1.iter().find(|i| **i >= QsId::Qs1.full_arity()) {
            return Err(Error::Config(format!("negated_qs1 names unknown presence question {i}")));
        }
        Ok(())
    }
}
