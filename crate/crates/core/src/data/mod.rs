//! Synthetic streaming datasets and on-disk dataset documents.

mod voc;

pub use voc::{join_features, parse_voc_xml, read_feature_csv, FeatureRow, GroundTruthObject, GroundTruthRecord};

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BoundingBox, ClassId, DatasetStore, GivenLabel, Label, Partition, Provenance, Sample, SampleId,
};

const SUM_TOL: f64 = 1e-9;
const MIN_BOX: f64 = 1e-3;

// independent random streams so that, say, changing label_noise does not
// move any feature vector
const STREAM_ORDER: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: ClassId,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub well: f64,
    pub tentative: f64,
    pub validation: f64,
    pub test: f64,
}

impl Splits {
    fn as_array(&self) -> [f64; 4] {
        [self.well, self.tentative, self.validation, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    pub n_total: usize,
    pub label_noise: f64,
    pub box_jitter: f64,
    pub splits: Splits,
}

/// Fixes the class means of [`GenSpec::benchmark`] across seeds.
pub const BENCHMARK_LAYOUT_SEED: u64 = 7;

impl GenSpec {
    /// Class means placed at `separation` along independent random
    /// directions drawn from `layout_seed`; every class shares `cov_scale`.
    pub fn gaussian_mixture(
        seed: u64,
        dim: usize,
        priors: &[f64],
        separation: f64,
        cov_scale: f64,
        layout_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let classes = priors
            .iter()
            .enumerate()
            .map(|(id, &prior)| {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                ClassSpec {
                    id,
                    mean: dir.iter().map(|v| v * separation / norm).collect(),
                    cov_scale,
                    prior,
                }
            })
            .collect();
        GenSpec {
            seed,
            dim,
            classes,
            n_total: 1000,
            label_noise: 0.0,
            box_jitter: 0.0,
            splits: Splits {
                well: 0.05,
                tentative: 0.65,
                validation: 0.15,
                test: 0.15,
            },
        }
    }

    /// The bundled benchmark: 8 classes in 16 dimensions, four common classes
    /// four times as frequent as four rare ones, 4000 samples, 20% label
    /// noise on the tentative pool and a 2% initial labeled set.
    pub fn benchmark(seed: u64) -> Self {
        let mut priors = vec![0.2; 4];
        priors.extend([0.05; 4]);
        let mut spec = GenSpec::gaussian_mixture(seed, 16, &priors, 2.0, 1.0, BENCHMARK_LAYOUT_SEED);
        spec.n_total = 4000;
        spec.label_noise = 0.2;
        spec.splits = Splits {
            well: 0.02,
            tentative: 0.68,
            validation: 0.15,
            test: 0.15,
        };
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.classes.is_empty() {
            return Err(Error::Empty("classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::invalid(format!("class ids must be 0..{} in order; entry {i} has id {}", self.classes.len(), c.id)));
            }
            if c.mean.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: c.mean.len(),
                });
            }
            if !(c.cov_scale >= 0.0 && c.cov_scale.is_finite()) {
                return Err(Error::invalid(format!("class {i}: cov_scale must be non-negative")));
            }
            if !(c.prior >= 0.0) {
                return Err(Error::invalid(format!("class {i}: prior must be non-negative")));
            }
        }
        let prior_sum: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (prior_sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("class priors sum to {prior_sum}, not 1")));
        }
        let splits = self.splits.as_array();
        if splits.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("split fractions must be non-negative"));
        }
        let split_sum: f64 = splits.iter().sum();
        if (split_sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("splits sum to {split_sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        if self.label_noise > 0.0 && self.classes.len() < 2 {
            return Err(Error::invalid("label noise needs at least two classes"));
        }
        if !(self.box_jitter >= 0.0 && self.box_jitter.is_finite()) {
            return Err(Error::invalid("box_jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items by `weights` (which sum to
/// 1). Remainder ties go to the lower index.
pub fn quota_allocation(weights: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Width and height of every truth box of class `class`.
pub fn class_box_size(class: ClassId) -> (f64, f64) {
    (0.4 + 0.05 * (class % 4) as f64, 0.4 + 0.05 * ((class / 4) % 4) as f64)
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn truth_box(features: &[f64], class: ClassId, jitter: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = class_box_size(class);
    let mut cx = logistic(features[0]);
    let mut cy = logistic(features[1]);
    if jitter > 0.0 {
        cx += jitter * rng.sample::<f64, _>(StandardNormal);
        cy += jitter * rng.sample::<f64, _>(StandardNormal);
    }
    BoundingBox::clamped(cx - w / 2.0, cy - h / 2.0, w, h, MIN_BOX)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a dataset whose ids follow stream order.
pub fn generate(spec: &GenSpec) -> Result<DatasetStore> {
    spec.validate()?;
    let priors: Vec<f64> = spec.classes.iter().map(|c| c.prior).collect();
    let quotas = quota_allocation(&priors, spec.n_total);

    let mut order: Vec<ClassId> = quotas
        .iter()
        .enumerate()
        .flat_map(|(c, &q)| std::iter::repeat_n(c, q))
        .collect();
    order.shuffle(&mut rng_stream(spec.seed, STREAM_ORDER));

    // each class is split on its own so every partition keeps the class mix
    let split_weights = spec.splits.as_array();
    let mut remaining: Vec<[usize; 4]> = quotas
        .iter()
        .map(|&q| {
            let v = quota_allocation(&split_weights, q);
            [v[0], v[1], v[2], v[3]]
        })
        .collect();
    let split_order = [Partition::Well, Partition::Validation, Partition::Test, Partition::Tentative];
    let slot = |p: Partition| match p {
        Partition::Well => 0,
        Partition::Tentative => 1,
        Partition::Validation => 2,
        Partition::Test => 3,
    };

    let mut feat_rng = rng_stream(spec.seed, STREAM_FEATURES);
    let mut noise_rng = rng_stream(spec.seed, STREAM_NOISE);
    let n_classes = spec.classes.len();
    let mut store = DatasetStore::new(spec.dim);

    for (i, &class) in order.iter().enumerate() {
        let cs = &spec.classes[class];
        let features: Vec<f64> = cs
            .mean
            .iter()
            .map(|m| m + cs.cov_scale * feat_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bbox = truth_box(&features, class, spec.box_jitter, &mut feat_rng);
        let truth = Label { class, bbox };

        let partition = split_order
            .into_iter()
            .find(|p| remaining[class][slot(*p)] > 0)
            .expect("split quotas cover the class quota");
        remaining[class][slot(partition)] -= 1;

        let mut sample = Sample::new(i as SampleId, features, Some(truth));
        match partition {
            Partition::Well => sample.given_label = Some(given(truth.class, bbox)),
            Partition::Tentative => {
                // the draw happens for every tentative sample so the noise
                // pattern depends only on the seed and the rate
                let flip = noise_rng.random::<f64>() < spec.label_noise;
                let offset = noise_rng.random_range(1..n_classes.max(2));
                let class = if flip { (class + offset) % n_classes } else { class };
                sample.given_label = Some(given(class, bbox));
            }
            Partition::Validation | Partition::Test => {}
        }
        store.insert(sample, partition)?;
    }
    Ok(store)
}

fn given(class: ClassId, bbox: BoundingBox) -> GivenLabel {
    GivenLabel {
        class,
        bbox,
        provenance: Provenance::Initial,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    id: SampleId,
    features: Vec<f64>,
    truth: Option<Label>,
    given_label: Option<GivenLabel>,
    partition: Partition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetDocument {
    spec: Option<GenSpec>,
    dim: usize,
    samples: Vec<SampleRecord>,
}

/// A store plus the generator spec it came from, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Option<GenSpec>,
    pub store: DatasetStore,
}

impl Dataset {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        let samples = self
            .store
            .samples()
            .map(|s| SampleRecord {
                id: s.id,
                features: s.features.clone(),
                truth: s.stored_truth().copied(),
                given_label: s.given_label,
                partition: self.store.partition_of(s.id).expect("stored samples are partitioned"),
            })
            .collect();
        let doc = DatasetDocument {
            spec: self.spec.clone(),
            dim: self.store.dim(),
            samples,
        };
        serde_json::to_writer(writer, &doc)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let doc: DatasetDocument = serde_json::from_reader(reader)?;
        let mut store = DatasetStore::new(doc.dim);
        for r in doc.samples {
            let mut s = Sample::new(r.id, r.features, r.truth);
            s.given_label = r.given_label;
            if let Some(g) = &s.given_label {
                g.bbox.validate()?;
            }
            store.insert(s, r.partition)?;
        }
        Ok(Dataset { spec: doc.spec, store })
    }
}
