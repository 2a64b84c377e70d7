//! Greedy growth of the final batch from the most confident candidate.

use std::collections::BTreeMap;

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::model::{squared_distance, DatasetStore, SampleId};

/// What a rule sees about each remaining candidate, index-aligned.
pub struct Remaining<'a> {
    /// Squared feature distance to the nearest selected sample.
    pub nearest: &'a [f64],
    /// Smallest absolute confidence-score gap to any selected sample.
    pub score_gap: &'a [f64],
}

/// How the next sample is chosen once the batch is seeded.
pub trait ConfidenceRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the index of the remaining candidate to add next. Ties must
    /// resolve to the lowest index, which is the lowest id.
    fn pick(&self, remaining: &Remaining<'_>) -> usize;
}

/// Farthest-point growth: maximize the distance to the current batch.
#[derive(Debug, Default, Clone, Copy)]
pub struct MaxMin;

impl ConfidenceRule for MaxMin {
    fn name(&self) -> &'static str {
        "max_min"
    }

    fn pick(&self, remaining: &Remaining<'_>) -> usize {
        let nearest = remaining.nearest;
        let mut best = 0;
        for (i, d) in nearest.iter().enumerate() {
            if *d > nearest[best] {
                best = i;
            }
        }
        best
    }
}

/// Confidence-similarity growth: add the candidate whose score is closest to
/// a score already in the batch. Starting from the top-scoring sample this
/// walks down the confidence ranking.
#[derive(Debug, Default, Clone, Copy)]
pub struct MostSimilar;

impl ConfidenceRule for MostSimilar {
    fn name(&self) -> &'static str {
        "most_similar"
    }

    fn pick(&self, remaining: &Remaining<'_>) -> usize {
        let gap = remaining.score_gap;
        let mut best = 0;
        for (i, g) in gap.iter().enumerate() {
            if *g < gap[best] {
                best = i;
            }
        }
        best
    }
}

pub struct ConfidenceRuleRegistry {
    rules: BTreeMap<&'static str, Box<dyn ConfidenceRule>>,
}

impl Default for ConfidenceRuleRegistry {
    fn default() -> Self {
        let mut r = ConfidenceRuleRegistry { rules: BTreeMap::new() };
        r.register(Box::new(MaxMin));
        r.register(Box::new(MostSimilar));
        r
    }
}

impl ConfidenceRuleRegistry {
    pub fn register(&mut self, rule: Box<dyn ConfidenceRule>) {
        self.rules.insert(rule.name(), rule);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ConfidenceRule> {
        self.rules
            .get(name)
            .map(|r| r.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "confidence rule",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.rules.keys().copied()
    }
}

/// Seeds the batch with the highest-scoring candidate, then grows it with
/// `rule` until it holds `gamma` ids. Ties go to the lowest id.
pub fn confidence_select(
    model: &DetectorModel,
    diversity_ids: &[SampleId],
    store: &DatasetStore,
    gamma: usize,
    rule: &dyn ConfidenceRule,
) -> Result<Vec<SampleId>> {
    if diversity_ids.is_empty() {
        return Err(Error::Empty("diversity set"));
    }
    if gamma > diversity_ids.len() {
        return Err(Error::invalid(format!(
            "gamma = {gamma} exceeds {} diversity candidates",
            diversity_ids.len()
        )));
    }
    let mut ids = diversity_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let features: Vec<&[f64]> = ids.iter().map(|&id| store.features(id)).collect::<Result<_>>()?;

    let scores: Vec<f64> = features.iter().map(|f| Ok(model.score(f)?.f_x)).collect::<Result<_>>()?;
    let mut top = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[top] {
            top = i;
        }
    }

    let mut selected = vec![ids[top]];
    let mut remaining: Vec<usize> = (0..ids.len()).filter(|&i| i != top).collect();
    let mut nearest: Vec<f64> = remaining
        .iter()
        .map(|&i| squared_distance(features[i], features[top]))
        .collect();
    let mut score_gap: Vec<f64> = remaining.iter().map(|&i| (scores[i] - scores[top]).abs()).collect();

    while selected.len() < gamma {
        let pos = rule.pick(&Remaining {
            nearest: &nearest,
            score_gap: &score_gap,
        });
        let chosen = remaining.remove(pos);
        nearest.remove(pos);
        score_gap.remove(pos);
        selected.push(ids[chosen]);
        for ((n, g), &i) in nearest.iter_mut().zip(score_gap.iter_mut()).zip(&remaining) {
            *n = n.min(squared_distance(features[i], features[chosen]));
            *g = g.min((scores[i] - scores[chosen]).abs());
        }
    }
    Ok(selected)
}
