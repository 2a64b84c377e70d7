//! Reference detector: multinomial logistic regression for the class head and
//! a linear map for the box head, trained jointly by a registered optimizer.

mod hierarchy;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, ClassId, DatasetStore, GivenLabel, Partition, Provenance, SampleId};
use crate::optim::{OptimizerConfig, OptimizerRegistry};

pub use hierarchy::{
    assign_case, hierarchical_score, predict_path, train_hierarchy, CaseTag, ClassNode, ClassPath,
    ClassTree, ExactSearch, GreedySearch, HierarchicalScore, LevelModels, NodeId, PathSearch,
    PathSearchRegistry, PROB_FLOOR,
};

pub const MODEL_VERSION: u32 = 1;
const MIN_BOX_SIZE: f64 = 1e-3;
const DEFAULT_BOX: [f64; 4] = [0.25, 0.25, 0.5, 0.5];

/// Linear detector. Parameters are kept in one flat vector: `num_classes`
/// rows of class weights, then four rows of box weights; each row holds `dim`
/// weights followed by a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    num_classes: usize,
    dim: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScore {
    pub class_probs: Vec<f64>,
    pub top_class: ClassId,
    pub f_x: f64,
    pub margin: f64,
    pub bbox: BoundingBox,
}

/// One supervised training pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub class: ClassId,
    pub target: [f64; 4],
}

impl DetectorModel {
    /// Zero class weights (uniform scores) and a centered default box.
    pub fn new(num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("detector needs at least 2 classes, got {num_classes}")));
        }
        if dim == 0 {
            return Err(Error::invalid("detector dimension must be positive"));
        }
        let mut model = DetectorModel {
            num_classes,
            dim,
            params: vec![0.0; (num_classes + 4) * (dim + 1)],
        };
        for (k, b) in DEFAULT_BOX.iter().enumerate() {
            let row = model.loc_row_start(k);
            model.params[row + dim] = *b;
        }
        Ok(model)
    }

    pub fn from_params(num_classes: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        let model = DetectorModel {
            num_classes,
            dim,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 {
            return Err(Error::invalid("detector shape must have C >= 2 and d >= 1"));
        }
        let expected = (self.num_classes + 4) * (self.dim + 1);
        if self.params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        if !self.params.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("detector weights must be finite"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn stride(&self) -> usize {
        self.dim + 1
    }

    fn class_row(&self, c: usize) -> &[f64] {
        let s = self.stride();
        &self.params[c * s..(c + 1) * s]
    }

    fn loc_row_start(&self, k: usize) -> usize {
        (self.num_classes + k) * self.stride()
    }

    fn loc_row(&self, k: usize) -> &[f64] {
        let start = self.loc_row_start(k);
        &self.params[start..start + self.stride()]
    }

    /// Sets the class-head row for class `c` (weights then bias).
    pub fn set_class_row(&mut self, c: usize, row: &[f64]) -> Result<()> {
        if c >= self.num_classes {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        if row.len() != self.stride() {
            return Err(Error::DimensionMismatch {
                expected: self.stride(),
                got: row.len(),
            });
        }
        let s = self.stride();
        self.params[c * s..(c + 1) * s].copy_from_slice(row);
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok((0..self.num_classes).map(|c| affine(self.class_row(c), x)).collect())
    }

    pub fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    fn raw_box(&self, x: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            *o = affine(self.loc_row(k), x);
        }
        out
    }

    pub fn score(&self, x: &[f64]) -> Result<DetectionScore> {
        let class_probs = self.class_probs(x)?;
        let (top_class, f_x) = arg_max(&class_probs);
        let second = class_probs
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != top_class)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        let [bx, by, bw, bh] = self.raw_box(x);
        Ok(DetectionScore {
            top_class,
            f_x,
            margin: (f_x - second).max(0.0),
            bbox: BoundingBox::clamped(bx, by, bw, bh, MIN_BOX_SIZE),
            class_probs,
        })
    }

    /// Mean of cross-entropy plus `loc_weight` times squared box error.
    pub fn loss(&self, examples: &[Example<'_>], loc_weight: f64) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let total: f64 = examples
            .iter()
            .map(|ex| {
                let probs = softmax(&self.logits_unchecked(ex.features));
                let ce = -probs[ex.class].max(f64::MIN_POSITIVE).ln();
                let raw = self.raw_box(ex.features);
                let sq: f64 = raw.iter().zip(&ex.target).map(|(r, t)| (r - t) * (r - t)).sum();
                ce + loc_weight * sq
            })
            .sum();
        total / examples.len() as f64
    }

    /// Analytic gradient of [`DetectorModel::loss`] with respect to the flat
    /// parameter vector.
    pub fn gradient(&self, examples: &[Example<'_>], loc_weight: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_gradient(examples, loc_weight, &mut grad);
        grad
    }

    fn accumulate_gradient(&self, examples: &[Example<'_>], loc_weight: f64, grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        if examples.is_empty() {
            return;
        }
        let s = self.stride();
        let scale = 1.0 / examples.len() as f64;
        for ex in examples {
            let probs = softmax(&self.logits_unchecked(ex.features));
            for (c, p) in probs.iter().enumerate() {
                let dz = (p - if c == ex.class { 1.0 } else { 0.0 }) * scale;
                let row = &mut grad[c * s..(c + 1) * s];
                for (g, xi) in row.iter_mut().zip(ex.features) {
                    *g += dz * xi;
                }
                row[self.dim] += dz;
            }
            let raw = self.raw_box(ex.features);
            for k in 0..4 {
                let dr = 2.0 * loc_weight * (raw[k] - ex.target[k]) * scale;
                let start = self.loc_row_start(k);
                let row = &mut grad[start..start + s];
                for (g, xi) in row.iter_mut().zip(ex.features) {
                    *g += dr * xi;
                }
                row[self.dim] += dr;
            }
        }
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes).map(|c| affine(self.class_row(c), x)).collect()
    }
}

fn affine(row: &[f64], x: &[f64]) -> f64 {
    let (w, b) = row.split_at(x.len());
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index and value of the maximum; lowest index wins ties.
fn arg_max(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Training settings beyond the optimizer itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Ridge penalty `ridge * ||params||^2` added to the loss.
    pub ridge: f64,
    /// Record the full-data loss after every epoch.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: DetectorModel,
    /// Loss before training followed by the loss after each epoch (when traced).
    pub loss_trace: Vec<f64>,
}

/// Trains on explicit examples; the input model is left untouched.
pub fn fit(
    init: &DetectorModel,
    examples: &[Example<'_>],
    opt: &OptimizerConfig,
    epochs: usize,
    options: FitOptions,
) -> Result<FitOutcome> {
    if epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for ex in examples {
        init.check_dim(ex.features)?;
        if ex.class >= init.num_classes {
            return Err(Error::invalid(format!(
                "label {} outside {} classes",
                ex.class, init.num_classes
            )));
        }
    }
    opt.validate()?;

    let mut model = init.clone();
    let mut optimizer = OptimizerRegistry::default().build(opt, model.params.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = opt.batch_size.unwrap_or(examples.len()).min(examples.len());
    let mut grad = vec![0.0; model.params.len()];
    let mut chunk: Vec<Example<'_>> = Vec::with_capacity(batch);
    let objective = |m: &DetectorModel| {
        let ridge = if options.ridge > 0.0 {
            options.ridge * m.params.iter().map(|v| v * v).sum::<f64>()
        } else {
            0.0
        };
        m.loss(examples, opt.loc_weight) + ridge
    };
    let mut loss_trace = Vec::new();
    if options.trace {
        loss_trace.push(objective(&model));
    }

    for _ in 0..epochs {
        if opt.shuffle {
            order.shuffle(&mut rng);
        }
        for idx in order.chunks(batch) {
            chunk.clear();
            chunk.extend(idx.iter().map(|&i| examples[i]));
            model.accumulate_gradient(&chunk, opt.loc_weight, &mut grad);
            if options.ridge > 0.0 {
                for (g, p) in grad.iter_mut().zip(&model.params) {
                    *g += 2.0 * options.ridge * p;
                }
            }
            optimizer.step(&mut model.params, &grad)?;
        }
        if options.trace {
            loss_trace.push(objective(&model));
        }
    }
    model.validate()?;
    Ok(FitOutcome { model, loss_trace })
}

/// Gathers `(features, given label)` examples for the listed ids.
pub fn examples_for<'a>(store: &'a DatasetStore, ids: &BTreeSet<SampleId>) -> Result<Vec<Example<'a>>> {
    ids.iter()
        .map(|&id| {
            let s = store.get(id)?;
            let label = s.given_label.ok_or(Error::Unlabeled(id))?;
            Ok(Example {
                features: &s.features,
                class: label.class,
                target: label.bbox.as_array(),
            })
        })
        .collect()
}

/// Trains a detector on the given labels of `train_ids`.
pub fn train(
    init: &DetectorModel,
    train_ids: &BTreeSet<SampleId>,
    store: &DatasetStore,
    opt: &OptimizerConfig,
    epochs: usize,
) -> Result<DetectorModel> {
    if epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    let examples = examples_for(store, train_ids)?;
    Ok(fit(init, &examples, opt, epochs, FitOptions::default())?.model)
}

/// Replaces the given label of each tentative id with the model's prediction.
pub fn pseudo_label(model: &DetectorModel, ids: &BTreeSet<SampleId>, store: &mut DatasetStore) -> Result<()> {
    let tentative = store.ids(Partition::Tentative);
    if let Some(&id) = ids.iter().find(|id| !tentative.contains(id)) {
        return Err(Error::NotInPartition {
            id,
            from: Partition::Tentative,
        });
    }
    let scored = ids
        .iter()
        .map(|&id| Ok((id, model.score(store.features(id)?)?)))
        .collect::<Result<Vec<_>>>()?;
    for (id, score) in scored {
        let sample = store.get_mut(id)?;
        if sample.prior_label.is_none() {
            sample.prior_label = sample.given_label;
        }
        sample.given_label = Some(GivenLabel {
            class: score.top_class,
            bbox: score.bbox,
            provenance: Provenance::Pseudo,
        });
        sample.pseudo_score = Some(score.f_x);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    dim: usize,
    num_classes: usize,
    weights: Vec<Vec<f64>>,
    loc_weights: Vec<Vec<f64>>,
}

impl Serialize for DetectorModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
            range
                .map(|r| self.params[r * self.stride()..(r + 1) * self.stride()].to_vec())
                .collect()
        };
        ModelFile {
            version: MODEL_VERSION,
            dim: self.dim,
            num_classes: self.num_classes,
            weights: rows(0..self.num_classes),
            loc_weights: rows(self.num_classes..self.num_classes + 4),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DetectorModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = ModelFile::deserialize(deserializer)?;
        if file.version != MODEL_VERSION {
            return Err(D::Error::custom(format!("unsupported model version {}", file.version)));
        }
        if file.weights.len() != file.num_classes || file.loc_weights.len() != 4 {
            return Err(D::Error::custom("weight matrix shape does not match num_classes"));
        }
        let params: Vec<f64> = file.weights.into_iter().chain(file.loc_weights).flatten().collect();
        DetectorModel::from_params(file.num_classes, file.dim, params).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Label, Sample};
    use proptest::prelude::*;
    use rand::Rng;

    fn two_class_model_with_logits(z0: f64, z1: f64) -> DetectorModel {
        let mut m = DetectorModel::new(2, 2).unwrap();
        m.set_class_row(0, &[0.0, 0.0, z0]).unwrap();
        m.set_class_row(1, &[0.0, 0.0, z1]).unwrap();
        m
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let m = DetectorModel::new(4, 3).unwrap();
        let s = m.score(&[1.0, -2.0, 0.5]).unwrap();
        for p in &s.class_probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert_eq!(s.margin, 0.0);
        assert_eq!(s.top_class, 0);
    }

    #[test]
    fn softmax_hand_case() {
        let m = two_class_model_with_logits(3f64.ln(), 0.0);
        let s = m.score(&[0.3, 0.9]).unwrap();
        assert!((s.class_probs[0] - 0.75).abs() < 1e-15);
        assert!((s.class_probs[1] - 0.25).abs() < 1e-15);
        assert_eq!(s.top_class, 0);
        assert!((s.f_x - 0.75).abs() < 1e-15);
        assert!((s.margin - 0.5).abs() < 1e-15);
        assert_eq!(s, m.score(&[0.3, 0.9]).unwrap());
    }

    #[test]
    fn score_rejects_wrong_dimension() {
        let m = DetectorModel::new(2, 3).unwrap();
        assert!(matches!(m.score(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    fn separable_store() -> (DatasetStore, BTreeSet<SampleId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = DatasetStore::new(2);
        let mut ids = BTreeSet::new();
        for id in 0..20u64 {
            let class = (id % 2) as usize;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let f = vec![sign * rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)];
            let bbox = BoundingBox::new(0.2, 0.2, 0.4, 0.4).unwrap();
            let mut s = Sample::new(id, f, Some(Label { class, bbox }));
            s.given_label = Some(GivenLabel {
                class,
                bbox,
                provenance: Provenance::Initial,
            });
            store.insert(s, Partition::Well).unwrap();
            ids.insert(id);
        }
        (store, ids)
    }

    #[test]
    fn separable_two_class_reaches_full_training_accuracy() {
        let (store, ids) = separable_store();
        let init = DetectorModel::new(2, 2).unwrap();
        let model = train(&init, &ids, &store, &OptimizerConfig::adam(0.001), 500).unwrap();
        for &id in &ids {
            let s = store.get(id).unwrap();
            let pred = model.score(&s.features).unwrap().top_class;
            assert_eq!(pred, s.given_label.unwrap().class, "sample {id}");
        }
        // input model untouched
        assert_eq!(init, DetectorModel::new(2, 2).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (store, ids) = separable_store();
        let init = DetectorModel::new(2, 2).unwrap();
        let cfg = OptimizerConfig {
            seed: 11,
            ..OptimizerConfig::adam(0.01)
        };
        let a = train(&init, &ids, &store, &cfg, 20).unwrap();
        let b = train(&init, &ids, &store, &cfg, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_preconditions() {
        let (mut store, ids) = separable_store();
        let init = DetectorModel::new(2, 2).unwrap();
        let cfg = OptimizerConfig::adam(0.001);
        assert!(train(&init, &ids, &store, &cfg, 0).is_err());
        assert!(matches!(
            train(&init, &BTreeSet::new(), &store, &cfg, 1),
            Err(Error::Empty(_))
        ));
        store
            .insert(Sample::new(99, vec![0.0, 0.0], None), Partition::Tentative)
            .unwrap();
        assert!(matches!(
            train(&init, &BTreeSet::from([99]), &store, &cfg, 1),
            Err(Error::Unlabeled(99))
        ));
    }

    #[test]
    fn full_batch_sgd_loss_is_non_increasing() {
        let (store, ids) = separable_store();
        let examples = examples_for(&store, &ids).unwrap();
        let cfg = OptimizerConfig {
            batch_size: None,
            shuffle: false,
            ..OptimizerConfig::sgd(1e-4)
        };
        let out = fit(
            &DetectorModel::new(2, 2).unwrap(),
            &examples,
            &cfg,
            200,
            FitOptions {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.loss_trace.len(), 201);
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let mut store = DatasetStore::new(2);
        let truth = Label {
            class: 1,
            bbox: BoundingBox::new(0.0, 0.0, 0.3, 0.3).unwrap(),
        };
        store
            .insert(Sample::new(5, vec![0.1, 0.2], Some(truth)), Partition::Tentative)
            .unwrap();
        let model = two_class_model_with_logits(3f64.ln(), 0.0);

        let before = store.clone();
        pseudo_label(&model, &BTreeSet::new(), &mut store).unwrap();
        assert_eq!(store, before);

        pseudo_label(&model, &BTreeSet::from([5]), &mut store).unwrap();
        let s = store.get(5).unwrap();
        let given = s.given_label.unwrap();
        assert_eq!(given.class, 0);
        assert_eq!(given.provenance, Provenance::Pseudo);
        assert!((s.pseudo_score.unwrap() - 0.75).abs() < 1e-15);
        let key = crate::model::TruthAccess::new(crate::model::TruthRole::Auditor);
        assert_eq!(s.truth(&key), Some(&truth));

        let mut store2 = DatasetStore::new(2);
        let mut s = Sample::new(1, vec![0.0, 0.0], None);
        s.given_label = Some(GivenLabel {
            class: 0,
            bbox: truth.bbox,
            provenance: Provenance::Initial,
        });
        store2.insert(s, Partition::Well).unwrap();
        assert!(pseudo_label(&model, &BTreeSet::from([1]), &mut store2).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let mut m = DetectorModel::new(3, 2).unwrap();
        m.params_mut()[4] = 0.1 + 0.2;
        m.params_mut()[7] = -1.0 / 3.0;
        let json = serde_json::to_string(&m).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["weights"].as_array().unwrap().len(), 3);
        assert_eq!(v["loc_weights"].as_array().unwrap().len(), 4);
        let back: DetectorModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    fn random_case(seed: u64) -> (DetectorModel, Vec<(Vec<f64>, usize, [f64; 4])>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (3, 4);
        let params = (0..(c + 4) * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = DetectorModel::from_params(c, d, params).unwrap();
        let data = (0..6)
            .map(|_| {
                let x = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let t = [0.1, 0.2, 0.3, 0.4].map(|v: f64| v + rng.random_range(0.0..0.1));
                (x, rng.random_range(0..c), t)
            })
            .collect();
        (model, data)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        for seed in 0..5 {
            let (model, data) = random_case(seed);
            let examples: Vec<Example<'_>> = data
                .iter()
                .map(|(x, c, t)| Example {
                    features: x,
                    class: *c,
                    target: *t,
                })
                .collect();
            let grad = model.gradient(&examples, 1.0);
            let h = 1e-5;
            for i in 0..model.params().len() {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.loss(&examples, 1.0) - minus.loss(&examples, 1.0)) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 4)) {
            let (model, _) = random_case(seed);
            let s = model.score(&x).unwrap();
            let sum: f64 = s.class_probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(0.0 <= s.margin && s.margin <= s.f_x && s.f_x <= 1.0);
            s.bbox.validate().unwrap();
        }
    }
}
