//! Detection evaluation: greedy IoU matching, per-class average precision
//! (11-point and all-point), mean AP and plain accuracy.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::model::{iou, BoundingBox, ClassId, DatasetStore, SampleId, TruthAccess, TruthRole};

pub const DEFAULT_IOU_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: SampleId,
    pub class_id: ClassId,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub sample_id: SampleId,
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Truth dump entry: all objects of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDump {
    pub sample_id: SampleId,
    pub objects: Vec<TruthObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

pub fn flatten_truths(dump: &[TruthDump]) -> Vec<TruthRecord> {
    dump.iter()
        .flat_map(|d| {
            d.objects.iter().map(move |o| TruthRecord {
                sample_id: d.sample_id,
                class_id: o.class_id,
                bbox: o.bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    #[default]
    ElevenPoint,
    AllPoint,
}

/// Score descending, then sample id, then class id.
fn ranking(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.sample_id.cmp(&b.sample_id))
        .then(a.class_id.cmp(&b.class_id))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    pub detection: DetectionRecord,
    pub true_positive: bool,
}

/// Greedy matching in score order. Each detection is compared with the
/// best-overlapping truth of the same sample and class; it is a true positive
/// when that overlap reaches `iou_thresh` and the truth is still unmatched.
pub fn match_detections(dets: &[DetectionRecord], truths: &[TruthRecord], iou_thresh: f64) -> Vec<MatchedDetection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(ranking);
    let mut used = vec![false; truths.len()];
    sorted
        .into_iter()
        .map(|det| {
            let best = truths
                .iter()
                .enumerate()
                .filter(|(_, t)| t.sample_id == det.sample_id && t.class_id == det.class_id)
                .map(|(i, t)| (i, iou(&det.bbox, &t.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                    Some((_, best)) if best >= o => acc,
                    _ => Some((i, o)),
                });
            let true_positive = match best {
                Some((i, o)) if o >= iou_thresh && !used[i] => {
                    used[i] = true;
                    true
                }
                _ => false,
            };
            MatchedDetection {
                detection: det,
                true_positive,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// (recall, precision) after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap_11pt: f64,
    pub ap_all: f64,
}

impl PrCurve {
    pub fn from_flags(flags: &[bool], n_truth: usize) -> Result<Self> {
        if n_truth == 0 {
            return Err(Error::invalid("average precision needs at least one truth"));
        }
        let mut tp = 0usize;
        let points: Vec<(f64, f64)> = flags
            .iter()
            .enumerate()
            .map(|(k, &hit)| {
                tp += hit as usize;
                (tp as f64 / n_truth as f64, tp as f64 / (k + 1) as f64)
            })
            .collect();

        // precision envelope: best precision at this rank or deeper
        let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
        for k in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[k] = envelope[k].max(envelope[k + 1]);
        }

        let ap_11pt = (0..=10)
            .map(|i| {
                let t = i as f64 / 10.0;
                points
                    .iter()
                    .position(|p| p.0 >= t)
                    .map_or(0.0, |k| envelope[k])
            })
            .sum::<f64>()
            / 11.0;

        let mut prev_recall = 0.0;
        let mut ap_all = 0.0;
        for (k, &(recall, _)) in points.iter().enumerate() {
            ap_all += (recall - prev_recall) * envelope[k];
            prev_recall = recall;
        }

        Ok(PrCurve {
            points,
            ap_11pt,
            ap_all,
        })
    }

    pub fn ap(&self, variant: ApVariant) -> f64 {
        match variant {
            ApVariant::ElevenPoint => self.ap_11pt,
            ApVariant::AllPoint => self.ap_all,
        }
    }
}

/// AP from TP/FP flags given in ranked order.
pub fn average_precision(flags: &[bool], n_truth: usize, variant: ApVariant) -> Result<f64> {
    Ok(PrCurve::from_flags(flags, n_truth)?.ap(variant))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// (class, AP) for every class that has at least one truth.
    pub per_class: Vec<(ClassId, f64)>,
}

pub fn mean_ap_report(
    dets: &[DetectionRecord],
    truths: &[TruthRecord],
    classes: &[ClassId],
    variant: ApVariant,
    iou_thresh: f64,
) -> Result<MapReport> {
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    let mut per_class = Vec::new();
    for &c in classes.iter().collect::<BTreeSet<_>>() {
        let class_truths: Vec<TruthRecord> = truths.iter().filter(|t| t.class_id == c).copied().collect();
        if class_truths.is_empty() {
            continue;
        }
        let class_dets: Vec<DetectionRecord> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let flags: Vec<bool> = match_detections(&class_dets, &class_truths, iou_thresh)
            .iter()
            .map(|m| m.true_positive)
            .collect();
        per_class.push((c, average_precision(&flags, class_truths.len(), variant)?));
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no listed class has any ground truth"));
    }
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { map, per_class })
}

/// Unweighted mean of per-class AP over classes with at least one truth.
pub fn mean_ap(
    dets: &[DetectionRecord],
    truths: &[TruthRecord],
    classes: &[ClassId],
    variant: ApVariant,
    iou_thresh: f64,
) -> Result<f64> {
    Ok(mean_ap_report(dets, truths, classes, variant, iou_thresh)?.map)
}

/// Scores a model against hidden ground truth. Holds its own truth capability
/// so reads are attributable to evaluation.
#[derive(Debug)]
pub struct Evaluator {
    access: TruthAccess,
    pub variant: ApVariant,
    pub iou_thresh: f64,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self::new(ApVariant::ElevenPoint, DEFAULT_IOU_THRESH)
    }
}

impl Evaluator {
    pub fn new(variant: ApVariant, iou_thresh: f64) -> Self {
        Evaluator {
            access: TruthAccess::new(TruthRole::Evaluator),
            variant,
            iou_thresh,
        }
    }

    pub fn truth_reads(&self) -> u64 {
        self.access.reads()
    }

    /// One detection per sample: the top class with its probability and box.
    pub fn detections(
        model: &DetectorModel,
        store: &DatasetStore,
        ids: &BTreeSet<SampleId>,
    ) -> Result<Vec<DetectionRecord>> {
        ids.iter()
            .map(|&id| {
                let s = model.score(store.features(id)?)?;
                Ok(DetectionRecord {
                    sample_id: id,
                    class_id: s.top_class,
                    score: s.f_x,
                    bbox: s.bbox,
                })
            })
            .collect()
    }

    pub fn truths(&self, store: &DatasetStore, ids: &BTreeSet<SampleId>) -> Result<Vec<TruthRecord>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if let Some(t) = store.get(id)?.truth(&self.access) {
                out.push(TruthRecord {
                    sample_id: id,
                    class_id: t.class,
                    bbox: t.bbox,
                });
            }
        }
        Ok(out)
    }

    pub fn map_report(&self, model: &DetectorModel, store: &DatasetStore, ids: &BTreeSet<SampleId>) -> Result<MapReport> {
        let dets = Self::detections(model, store, ids)?;
        let truths = self.truths(store, ids)?;
        let classes: Vec<ClassId> = (0..model.num_classes()).collect();
        mean_ap_report(&dets, &truths, &classes, self.variant, self.iou_thresh)
    }

    pub fn map(&self, model: &DetectorModel, store: &DatasetStore, ids: &BTreeSet<SampleId>) -> Result<f64> {
        Ok(self.map_report(model, store, ids)?.map)
    }

    /// Fraction of samples whose top class equals the truth class.
    pub fn accuracy(&self, model: &DetectorModel, store: &DatasetStore, ids: &BTreeSet<SampleId>) -> Result<f64> {
        let truths = self.truths(store, ids)?;
        if truths.is_empty() {
            return Err(Error::Empty("evaluation truths"));
        }
        let mut hits = 0usize;
        for t in &truths {
            if model.score(store.features(t.sample_id)?)?.top_class == t.class_id {
                hits += 1;
            }
        }
        Ok(hits as f64 / truths.len() as f64)
    }
}
