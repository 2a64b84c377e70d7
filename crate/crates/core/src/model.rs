//! Shared domain types: boxes, samples, the partitioned dataset store and the
//! sampling-parameter triple, plus the elementary geometric primitives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SampleId = u64;
pub type ClassId = usize;

const BOX_SLACK: f64 = 1e-9;

/// Axis-aligned box in normalized image coordinates, stored as left/top corner
/// plus width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let BoundingBox { x, y, w, h } = *self;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidBox(format!("non-positive size in {self:?}")));
        }
        if x < -BOX_SLACK || y < -BOX_SLACK {
            return Err(Error::InvalidBox(format!("negative origin in {self:?}")));
        }
        if x + w > 1.0 + BOX_SLACK || y + h > 1.0 + BOX_SLACK {
            return Err(Error::InvalidBox(format!("box exceeds unit square: {self:?}")));
        }
        Ok(())
    }

    /// Projects an arbitrary (x, y, w, h) guess onto a valid box.
    pub fn clamped(x: f64, y: f64, w: f64, h: f64, min_size: f64) -> Self {
        let fix = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
        let w = fix(w, 0.5).clamp(min_size, 1.0);
        let h = fix(h, 0.5).clamp(min_size, 1.0);
        let x = fix(x, 0.0).clamp(0.0, 1.0 - w);
        let y = fix(y, 0.0).clamp(0.0, 1.0 - h);
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Euclidean distance between two feature vectors.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(squared_distance(a, b).sqrt())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class: ClassId,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Oracle,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GivenLabel {
    pub class: ClassId,
    pub bbox: BoundingBox,
    pub provenance: Provenance,
}

impl GivenLabel {
    pub fn label(&self) -> Label {
        Label {
            class: self.class,
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthRole {
    Oracle,
    Evaluator,
    Auditor,
}

/// Capability required to read a sample's ground truth. Every read is counted
/// so callers can verify who looked at hidden labels.
#[derive(Debug)]
pub struct TruthAccess {
    role: TruthRole,
    reads: AtomicU64,
}

impl TruthAccess {
    pub fn new(role: TruthRole) -> Self {
        TruthAccess {
            role,
            reads: AtomicU64::new(0),
        }
    }

    pub fn role(&self) -> TruthRole {
        self.role
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    truth: Option<Label>,
    pub given_label: Option<GivenLabel>,
    pub pseudo_score: Option<f64>,
    /// Label held before pseudo-labeling overwrote it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_label: Option<GivenLabel>,
}

impl Sample {
    pub fn new(id: SampleId, features: Vec<f64>, truth: Option<Label>) -> Self {
        Sample {
            id,
            features,
            truth,
            given_label: None,
            pseudo_score: None,
            prior_label: None,
        }
    }

    pub fn truth(&self, access: &TruthAccess) -> Option<&Label> {
        access.reads.fetch_add(1, Ordering::Relaxed);
        self.truth.as_ref()
    }

    /// Unaudited read for persistence only; never reachable by the learner.
    pub(crate) fn stored_truth(&self) -> Option<&Label> {
        self.truth.as_ref()
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Well,
    Tentative,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Well,
        Partition::Tentative,
        Partition::Validation,
        Partition::Test,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Partition::Well => "well",
            Partition::Tentative => "tentative",
            Partition::Validation => "validation",
            Partition::Test => "test",
        };
        f.write_str(s)
    }
}

/// The partitioned sample universe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStore {
    dim: usize,
    samples: BTreeMap<SampleId, Sample>,
    partitions: [BTreeSet<SampleId>; 4],
}

impl DatasetStore {
    pub fn new(dim: usize) -> Self {
        DatasetStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn insert(&mut self, sample: Sample, partition: Partition) -> Result<()> {
        if sample.features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: sample.features.len(),
            });
        }
        if self.samples.contains_key(&sample.id) {
            return Err(Error::Duplicate(format!("sample id {}", sample.id)));
        }
        if partition == Partition::Well && sample.given_label.is_none() {
            return Err(Error::Unlabeled(sample.id));
        }
        self.partitions[partition.index()].insert(sample.id);
        self.samples.insert(sample.id, sample);
        Ok(())
    }

    pub fn get(&self, id: SampleId) -> Result<&Sample> {
        self.samples.get(&id).ok_or(Error::UnknownSample(id))
    }

    pub fn get_mut(&mut self, id: SampleId) -> Result<&mut Sample> {
        self.samples.get_mut(&id).ok_or(Error::UnknownSample(id))
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.values()
    }

    pub fn ids(&self, partition: Partition) -> &BTreeSet<SampleId> {
        &self.partitions[partition.index()]
    }

    pub fn partition_of(&self, id: SampleId) -> Option<Partition> {
        Partition::ALL
            .into_iter()
            .find(|p| self.partitions[p.index()].contains(&id))
    }

    pub fn features(&self, id: SampleId) -> Result<&[f64]> {
        Ok(&self.get(id)?.features)
    }

    /// Moves `ids` from one partition to another. Validation happens before any
    /// mutation, so a failed call leaves the store untouched.
    pub fn promote(&mut self, ids: &BTreeSet<SampleId>, from: Partition, to: Partition) -> Result<()> {
        for &id in ids {
            if !self.samples.contains_key(&id) {
                return Err(Error::UnknownSample(id));
            }
            if !self.partitions[from.index()].contains(&id) {
                return Err(Error::NotInPartition { id, from });
            }
            if self.partitions[to.index()].contains(&id) {
                return Err(Error::AlreadyInPartition { id, to });
            }
            if to == Partition::Well && self.samples[&id].given_label.is_none() {
                return Err(Error::Unlabeled(id));
            }
        }
        for &id in ids {
            self.partitions[from.index()].remove(&id);
            self.partitions[to.index()].insert(id);
        }
        Ok(())
    }

    /// Checks disjointness and that every partitioned id resolves.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in Partition::ALL {
            for &id in self.ids(p) {
                if !self.samples.contains_key(&id) {
                    return Err(Error::UnknownSample(id));
                }
                if !seen.insert(id) {
                    return Err(Error::Overlap(format!("sample {id} appears in more than one partition")));
                }
            }
        }
        for &id in self.ids(Partition::Well) {
            if self.samples[&id].given_label.is_none() {
                return Err(Error::Unlabeled(id));
            }
        }
        Ok(())
    }
}

/// The (uncertainty, diversity, confidence) fraction triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub u: f64,
    pub d: f64,
    pub c: f64,
}

impl SamplingParams {
    pub fn new(u: f64, d: f64, c: f64) -> Result<Self> {
        let p = SamplingParams { u, d, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("u", self.u), ("d", self.d), ("c", self.c)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("sampling.{name} = {v} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}
