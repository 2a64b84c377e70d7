//! Collaborative batch selection: uncertainty ranking, k-means diversity
//! filtering and greedy confidence growth.
//!
//! Whole selection pipelines implement [`BatchSelector`] and are registered by
//! name in a [`SelectorRegistry`]; the loop looks them up from the run config.

mod confidence;
mod kmeans;

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::model::{squared_distance, DatasetStore, SampleId, SamplingParams};

pub use confidence::{confidence_select, ConfidenceRule, ConfidenceRuleRegistry, MaxMin, MostSimilar, Remaining};
pub use kmeans::{kmeans, KMeans, MAX_LLOYD_ITERATIONS};

/// Sample counts derived from the fraction triple for one pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub eta: usize,
    pub theta: usize,
    pub gamma: usize,
}

/// `ceil(f * n)`, tolerant of representation error such as `0.7 * 10`.
fn ceil_fraction(f: f64, n: usize) -> usize {
    let raw = f * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Nested ceilings: `eta = ceil(u*pool)`, `theta = ceil(d*eta)`,
/// `gamma = ceil(c*theta)`.
pub fn resolve_counts(params: &SamplingParams, pool_size: usize) -> StageCounts {
    let pool = pool_size.max(1);
    let eta = ceil_fraction(params.u, pool);
    let theta = ceil_fraction(params.d, eta);
    let gamma = ceil_fraction(params.c, theta);
    StageCounts { eta, theta, gamma }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: SampleId,
    pub score: f64,
}

/// Returns the `eta` ids with the largest `1 - margin`, most uncertain first,
/// ties by ascending id.
pub fn uncertainty_select(
    model: &DetectorModel,
    pool_ids: &[SampleId],
    store: &DatasetStore,
    eta: usize,
) -> Result<Vec<ScoredId>> {
    if pool_ids.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    if eta > pool_ids.len() {
        return Err(Error::invalid(format!("eta = {eta} exceeds pool of {}", pool_ids.len())));
    }
    let mut scored = pool_ids
        .iter()
        .map(|&id| {
            let s = model.score(store.features(id)?)?;
            if !(0.0..=1.0).contains(&s.f_x) {
                return Err(Error::invalid(format!("score {} for sample {id} outside [0, 1]", s.f_x)));
            }
            Ok(ScoredId {
                id,
                score: 1.0 - s.margin,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    scored.truncate(eta);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityOutcome {
    /// One medoid per cluster, ascending id.
    pub ids: Vec<SampleId>,
    pub outliers: Vec<SampleId>,
}

/// Drops distance-to-mean outliers (beyond mean + 3 std), clusters the rest
/// into `min(theta, remaining, distinct points)` groups and returns each
/// cluster's medoid.
pub fn diversity_filter(candidate_ids: &[SampleId], store: &DatasetStore, theta: usize) -> Result<DiversityOutcome> {
    if candidate_ids.is_empty() {
        return Err(Error::Empty("diversity candidates"));
    }
    if theta == 0 || theta > candidate_ids.len() {
        return Err(Error::invalid(format!(
            "theta = {theta} must lie in 1..={}",
            candidate_ids.len()
        )));
    }
    let mut ids = candidate_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let feats: Vec<&[f64]> = ids.iter().map(|&id| store.features(id)).collect::<Result<_>>()?;
    let dim = feats[0].len();
    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let dists: Vec<f64> = feats.iter().map(|f| squared_distance(f, &mean).sqrt()).collect();
    let mu = dists.iter().sum::<f64>() / n;
    let sigma = (dists.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n).sqrt();
    let cutoff = mu + 3.0 * sigma;

    let mut kept = Vec::new();
    let mut outliers = Vec::new();
    for (i, &d) in dists.iter().enumerate() {
        if d > cutoff {
            outliers.push(ids[i]);
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("every candidate was removed as an outlier"));
    }

    let points: Vec<&[f64]> = kept.iter().map(|&i| feats[i]).collect();
    let mut distinct: Vec<&[f64]> = points.clone();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    let k = theta.min(points.len()).min(distinct.len());
    let km = kmeans(&points, k)?;

    let mut medoids: Vec<Option<(usize, f64)>> = vec![None; k];
    for (j, (&c, p)) in km.assignments.iter().zip(&points).enumerate() {
        let d = squared_distance(p, &km.centroids[c]);
        if medoids[c].is_none_or(|(_, best)| d < best) {
            medoids[c] = Some((j, d));
        }
    }
    let mut out: Vec<SampleId> = medoids.into_iter().flatten().map(|(j, _)| ids[kept[j]]).collect();
    out.sort_unstable();
    Ok(DiversityOutcome { ids: out, outliers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: String,
    pub ids: Vec<SampleId>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSelection {
    pub pool_ids: Vec<SampleId>,
    pub uncertain_ids: Vec<SampleId>,
    pub diversity_ids: Vec<SampleId>,
    pub selected_ids: Vec<SampleId>,
    pub audit: Vec<StageAudit>,
}

impl BatchSelection {
    pub fn is_nested(&self) -> bool {
        let within = |inner: &[SampleId], outer: &[SampleId]| inner.iter().all(|id| outer.contains(id));
        within(&self.selected_ids, &self.diversity_ids)
            && within(&self.diversity_ids, &self.uncertain_ids)
            && within(&self.uncertain_ids, &self.pool_ids)
    }
}

pub struct SelectionRequest<'a> {
    pub model: &'a DetectorModel,
    pub store: &'a DatasetStore,
    pub pool: &'a [SampleId],
    pub params: SamplingParams,
    pub confidence_rule: &'a dyn ConfidenceRule,
    pub seed: u64,
}

/// A complete batch-selection pipeline.
pub trait BatchSelector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, request: &SelectionRequest<'_>) -> Result<BatchSelection>;
}

fn audit(stage: &str, ids: &[SampleId], scores: Vec<f64>) -> StageAudit {
    StageAudit {
        stage: stage.to_string(),
        ids: ids.to_vec(),
        scores,
    }
}

fn confidence_scores(model: &DetectorModel, store: &DatasetStore, ids: &[SampleId]) -> Result<Vec<f64>> {
    ids.iter().map(|&id| Ok(model.score(store.features(id)?)?.f_x)).collect()
}

/// Uncertainty, then diversity, then confidence.
#[derive(Debug, Default, Clone, Copy)]
pub struct Collaborative;

impl BatchSelector for Collaborative {
    fn name(&self) -> &'static str {
        "collaborative"
    }

    fn select(&self, req: &SelectionRequest<'_>) -> Result<BatchSelection> {
        let counts = resolve_counts(&req.params, req.pool.len());
        let uncertain = uncertainty_select(req.model, req.pool, req.store, counts.eta)?;
        let uncertain_ids: Vec<SampleId> = uncertain.iter().map(|s| s.id).collect();
        let theta = counts.theta.min(uncertain_ids.len());
        let diversity = diversity_filter(&uncertain_ids, req.store, theta)?;
        let gamma = counts.gamma.min(diversity.ids.len());
        let selected = confidence_select(req.model, &diversity.ids, req.store, gamma, req.confidence_rule)?;
        Ok(BatchSelection {
            pool_ids: req.pool.to_vec(),
            audit: vec![
                audit("uncertainty", &uncertain_ids, uncertain.iter().map(|s| s.score).collect()),
                audit(
                    "diversity",
                    &diversity.ids,
                    confidence_scores(req.model, req.store, &diversity.ids)?,
                ),
                audit("outliers", &diversity.outliers, vec![]),
                audit(
                    "confidence",
                    &selected,
                    confidence_scores(req.model, req.store, &selected)?,
                ),
            ],
            uncertain_ids,
            diversity_ids: diversity.ids,
            selected_ids: selected,
        })
    }
}

/// Margin ranking only: the `gamma` most uncertain samples of the pool.
#[derive(Debug, Default, Clone, Copy)]
pub struct UncertaintyOnly;

impl BatchSelector for UncertaintyOnly {
    fn name(&self) -> &'static str {
        "uncertainty_only"
    }

    fn select(&self, req: &SelectionRequest<'_>) -> Result<BatchSelection> {
        let counts = resolve_counts(&req.params, req.pool.len());
        let uncertain = uncertainty_select(req.model, req.pool, req.store, counts.eta)?;
        let uncertain_ids: Vec<SampleId> = uncertain.iter().map(|s| s.id).collect();
        let selected: Vec<SampleId> = uncertain_ids.iter().take(counts.gamma).copied().collect();
        Ok(BatchSelection {
            pool_ids: req.pool.to_vec(),
            audit: vec![
                audit("uncertainty", &uncertain_ids, uncertain.iter().map(|s| s.score).collect()),
                audit(
                    "selected",
                    &selected,
                    uncertain.iter().take(counts.gamma).map(|s| s.score).collect(),
                ),
            ],
            uncertain_ids,
            diversity_ids: selected.clone(),
            selected_ids: selected,
        })
    }
}

/// Uniform draw of `gamma` samples from the pool.
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomSelector;

impl BatchSelector for RandomSelector {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(&self, req: &SelectionRequest<'_>) -> Result<BatchSelection> {
        if req.pool.is_empty() {
            return Err(Error::Empty("candidate pool"));
        }
        let counts = resolve_counts(&req.params, req.pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let selected: Vec<SampleId> = req.pool.choose_multiple(&mut rng, counts.gamma).copied().collect();
        Ok(BatchSelection {
            pool_ids: req.pool.to_vec(),
            audit: vec![audit("random", &selected, vec![])],
            uncertain_ids: selected.clone(),
            diversity_ids: selected.clone(),
            selected_ids: selected,
        })
    }
}

pub struct SelectorRegistry {
    selectors: BTreeMap<&'static str, Box<dyn BatchSelector>>,
}

impl Default for SelectorRegistry {
    fn default() -> Self {
        let mut r = SelectorRegistry {
            selectors: BTreeMap::new(),
        };
        r.register(Box::new(Collaborative));
        r.register(Box::new(UncertaintyOnly));
        r.register(Box::new(RandomSelector));
        r
    }
}

impl SelectorRegistry {
    pub fn register(&mut self, selector: Box<dyn BatchSelector>) {
        self.selectors.insert(selector.name(), selector);
    }

    pub fn get(&self, name: &str) -> Result<&dyn BatchSelector> {
        self.selectors
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "selector",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.selectors.keys().copied()
    }
}

#[cfg(test)]
mod tests;
