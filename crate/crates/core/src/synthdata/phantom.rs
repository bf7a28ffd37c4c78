//! Phantom volumes: a latent density grid with planted Gaussian blobs, viewed
//! through several intensity windows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::questions::{hierarchy_violations, qs2_index, qs3_index, FindingKind, LabelVector, Lobe, QsId, Side};
use crate::rng::{stream, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub kind: FindingKind,
    pub laterality: Side,
    pub lobe: Option<Lobe>,
    /// Voxel radius of the blob footprint.
    pub extent: usize,
    pub intensity: f64,
    /// Blob centre in voxel coordinates `(x, y, z)`.
    pub center: [usize; 3],
}

impl FindingSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(lobe) = self.lobe {
            if lobe.side() != self.laterality {
                return Err(Error::Invariant(format!("{lobe:?} is not on the {:?} side", self.laterality)));
            }
            if !self.kind.has_lobes() {
                return Err(Error::Invariant("pleural effusion cannot carry a lobe".into()));
            }
        }
        if self.extent == 0 {
            return Err(Error::Invariant("finding extent must be at least 1".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::Invariant(format!("finding intensity {} outside (0, 1]", self.intensity)));
        }
        Ok(())
    }
}

/// A 3-D scalar grid indexed `(x, y, z)` with `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn filled(dims: [usize; 3], v: f64) -> Self {
        Self { dims, data: vec![v; dims[0] * dims[1] * dims[2]] }
    }

    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self { name: name.to_string(), lo, hi }
    }
}

/// Windowed multi-channel volume, channel-major then `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    pub spacing: f64,
    pub channel_descriptors: Vec<String>,
}

impl PhantomVolume {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.voxels() + (x * self.dims[1] + y) * self.dims[2] + z]
    }
}

pub fn apply_windows(raw: &Grid3, windows: &[Window]) -> Result<PhantomVolume> {
    for w in windows {
        if !(w.lo < w.hi) {
            return Err(Error::Config(format!("window {:?} has lo {} >= hi {}", w.name, w.lo, w.hi)));
        }
    }
    let n = raw.data.len();
    let mut data = Vec::with_capacity(n * windows.len());
    for w in windows {
        let inv = 1.0 / (w.hi - w.lo);
        data.extend(raw.data.iter().map(|v| ((v - w.lo) * inv).clamp(0.0, 1.0)));
    }
    Ok(PhantomVolume {
        channels: windows.len(),
        dims: raw.dims,
        data,
        spacing: 1.0,
        channel_descriptors: windows.iter().map(|w| w.name.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub findings: Vec<FindingSpec>,
    /// Full-width label vectors (18 / 8 / 15 entries).
    pub qs1: LabelVector,
    pub qs2: LabelVector,
    pub qs3: LabelVector,
}

impl GroundTruth {
    pub fn from_findings(findings: Vec<FindingSpec>) -> Result<Self> {
        let mut qs1 = LabelVector::full_zeros(QsId::Qs1);
        let mut qs2 = LabelVector::full_zeros(QsId::Qs2);
        let mut qs3 = LabelVector::full_zeros(QsId::Qs3);
        for f in &findings {
            f.validate()?;
            qs1.values[f.kind.qs1_index()] = 1;
            qs2.values[qs2_index(f.kind, f.laterality)] = 1;
            if let Some(lobe) = f.lobe {
                qs3.values[qs3_index(f.kind, lobe).expect("lobar kind")] = 1;
            }
        }
        Ok(Self { findings, qs1, qs2, qs3 })
    }

    pub fn labels(&self, qs: QsId) -> &LabelVector {
        match qs {
            QsId::Qs1 => &self.qs1,
            QsId::Qs2 => &self.qs2,
            QsId::Qs3 => &self.qs3,
        }
    }

    pub fn check(&self) -> Result<()> {
        let v = hierarchy_violations(&self.qs1, &self.qs2, &self.qs3);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invariant(format!("inconsistent ground truth: {}", v.join("; "))))
        }
    }
}

/// Axis-aligned box `[lo, hi)` per axis.
pub type Region = [[usize; 2]; 3];

/// Lobes split each hemivolume along `z`: two bands on the left, three on the right.
pub fn lobe_region(lobe: Lobe, dims: [usize; 3]) -> Region {
    let [h, w, d] = dims;
    let z = match lobe {
        Lobe::Lll => [0, d / 2],
        Lobe::Lul => [d / 2, d],
        Lobe::Rll => [0, d / 3],
        Lobe::Rml => [d / 3, 2 * d / 3],
        Lobe::Rul => [2 * d / 3, d],
    };
    [side_x(lobe.side(), h), [0, w], z]
}

fn side_x(side: Side, h: usize) -> [usize; 2] {
    match side {
        Side::Left => [0, h / 2],
        Side::Right => [h / 2, h],
    }
}

/// Region a finding's centre is drawn from; the whole footprint stays inside it.
pub fn placement_region(kind: FindingKind, side: Side, lobe: Option<Lobe>, dims: [usize; 3]) -> Region {
    match (kind, lobe) {
        (_, Some(l)) => lobe_region(l, dims),
        (FindingKind::PleuralEffusion, None) => [side_x(side, dims[0]), [0, dims[1]], [0, dims[2] / 3]],
        (_, None) => [side_x(side, dims[0]), [0, dims[1]], [0, dims[2]]],
    }
}

fn sample_center<R: Rng>(region: Region, extent: usize, rng: &mut R) -> Result<[usize; 3]> {
    let mut c = [0; 3];
    for a in 0..3 {
        let [lo, hi] = region[a];
        let (min, max) = (lo + extent, hi.saturating_sub(1 + extent));
        if hi == 0 || min > max {
            return Err(Error::Config(format!("grid too small for a finding of extent {extent} along axis {a}")));
        }
        c[a] = rng.random_range(min..=max);
    }
    Ok(c)
}

/// Draws the findings for one phantom. With `config.forced` non-empty those
/// templates are used instead of prevalence sampling.
pub fn sample_findings(seed: u64, config: &DatasetConfig) -> Result<Vec<FindingSpec>> {
    config.validate()?;
    let mut rng = stream(seed, streams::FINDINGS);
    let mut out = Vec::new();
    let draw_extent = |kind: FindingKind, rng: &mut rand_chacha::ChaCha8Rng| {
        let [lo, hi] = config.extent[kind.index()];
        rng.random_range(lo..=hi)
    };
    if !config.forced.is_empty() {
        for f in &config.forced {
            let extent = f.extent.unwrap_or_else(|| draw_extent(f.kind, &mut rng));
            let intensity = f.intensity.unwrap_or_else(|| rng.random_range(config.intensity[0]..=config.intensity[1]));
            let center = sample_center(placement_region(f.kind, f.laterality, f.lobe, config.grid), extent, &mut rng)?;
            let spec = FindingSpec { kind: f.kind, laterality: f.laterality, lobe: f.lobe, extent, intensity, center };
            spec.validate()?;
            out.push(spec);
        }
        return Ok(out);
    }
    for kind in FindingKind::ALL {
        let present = rng.random::<f64>() < config.prevalence[kind.index()];
        if !present {
            continue;
        }
        let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
        let lobe = if kind.has_lobes() && rng.random::<f64>() < config.lobe_rate {
            let lobes = side.lobes();
            Some(lobes[rng.random_range(0..lobes.len())])
        } else {
            None
        };
        let extent = draw_extent(kind, &mut rng);
        let intensity = rng.random_range(config.intensity[0]..=config.intensity[1]);
        let center = sample_center(placement_region(kind, side, lobe, config.grid), extent, &mut rng)?;
        out.push(FindingSpec { kind, laterality: side, lobe, extent, intensity, center });
    }
    Ok(out)
}

/// Latent density grid for a set of findings: noisy background plus additive
/// Gaussian blobs, clamped to `[0, 1]`.
pub fn render_raw(findings: &[FindingSpec], seed: u64, config: &DatasetConfig) -> Result<Grid3> {
    let dims = config.grid;
    let mut g = Grid3::filled(dims, config.background);
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = stream(seed, streams::NOISE);
        for v in g.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for f in findings {
        let e = f.extent as isize;
        let sigma = (f.extent as f64 / 2.0).max(0.5);
        let amp = config.density[f.kind.index()] * f.intensity;
        let [cx, cy, cz] = f.center.map(|c| c as isize);
        for dx in -e..=e {
            for dy in -e..=e {
                for dz in -e..=e {
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    if d2 > (e * e) as f64 {
                        continue;
                    }
                    let (x, y, z) = (cx + dx, cy + dy, cz + dz);
                    if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
                        return Err(Error::Config(format!("finding footprint at {:?} leaves the grid", f.center)));
                    }
                    let i = g.idx(x as usize, y as usize, z as usize);
                    g.data[i] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    for v in g.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(g)
}

pub fn generate_phantom(seed: u64, config: &DatasetConfig) -> Result<(PhantomVolume, GroundTruth)> {
    let findings = sample_findings(seed, config)?;
    let raw = render_raw(&findings, seed, config)?;
    let mut vol = apply_windows(&raw, &config.windows)?;
    vol.spacing = config.spacing;
    let gt = GroundTruth::from_findings(findings)?;
    gt.check()?;
    Ok((vol, gt))
}

/// Ground truth only, skipping voxel rendering.
pub fn generate_ground_truth(seed: u64, config: &DatasetConfig) -> Result<GroundTruth> {
    GroundTruth::from_findings(sample_findings(seed, config)?)
}
