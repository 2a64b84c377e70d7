use super::*;
use crate::model::{distance, Partition, Sample};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn store_from(features: &[Vec<f64>]) -> DatasetStore {
    let mut store = DatasetStore::new(features[0].len());
    for (id, f) in features.iter().enumerate() {
        store
            .insert(Sample::new(id as SampleId, f.clone(), None), Partition::Tentative)
            .unwrap();
    }
    store
}

fn random_model(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> DetectorModel {
    let params = (0..(classes + 4) * (dim + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    DetectorModel::from_params(classes, dim, params).unwrap()
}

/// Pool drawn from a four-component unit-variance Gaussian mixture in the
/// plane, components centred at (±s, ±s).
fn mixture_pool(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<Vec<f64>> {
    let centers = [[-s, -s], [s, -s], [-s, s], [s, s]];
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..4)];
            vec![c[0] + noise.sample(rng), c[1] + noise.sample(rng)]
        })
        .collect()
}

fn ids(n: usize) -> Vec<SampleId> {
    (0..n as SampleId).collect()
}

#[test]
fn count_resolution_examples() {
    let p = SamplingParams::new(0.8, 0.6, 0.8).unwrap();
    assert_eq!(resolve_counts(&p, 100), StageCounts { eta: 80, theta: 48, gamma: 39 });
    let one = SamplingParams::new(1.0, 1.0, 1.0).unwrap();
    assert_eq!(resolve_counts(&one, 7), StageCounts { eta: 7, theta: 7, gamma: 7 });
    let tiny = SamplingParams::new(0.1, 0.2, 0.3).unwrap();
    assert_eq!(resolve_counts(&tiny, 1), StageCounts { eta: 1, theta: 1, gamma: 1 });
    // 0.7 * 10 is 7.000000000000001 in binary floating point
    let p = SamplingParams::new(0.7, 1.0, 1.0).unwrap();
    assert_eq!(resolve_counts(&p, 10).eta, 7);
}

proptest! {
    #[test]
    fn counts_are_nested(u in 0.01f64..=1.0, d in 0.01f64..=1.0, c in 0.01f64..=1.0, n in 1usize..500) {
        let k = resolve_counts(&SamplingParams { u, d, c }, n);
        prop_assert!(n >= k.eta && k.eta >= k.theta && k.theta >= k.gamma && k.gamma >= 1);
    }
}

/// Two-class model whose margin on feature value `x` is `|tanh(x / 2)|`.
fn margin_model() -> DetectorModel {
    let mut m = DetectorModel::new(2, 1).unwrap();
    m.set_class_row(0, &[1.0, 0.0]).unwrap();
    m
}

fn feature_for_margin(m: f64) -> Vec<f64> {
    vec![((1.0 + m) / (1.0 - m)).ln()]
}

#[test]
fn uncertainty_examples() {
    let store = store_from(&[feature_for_margin(0.9), feature_for_margin(0.05), feature_for_margin(0.5)]);
    let model = margin_model();
    let one = uncertainty_select(&model, &ids(3), &store, 1).unwrap();
    assert_eq!(one[0].id, 1);
    assert!((one[0].score - 0.95).abs() < 1e-12);

    let all: Vec<SampleId> = uncertainty_select(&model, &ids(3), &store, 3)
        .unwrap()
        .iter()
        .map(|s| s.id)
        .collect();
    assert_eq!(all, vec![1, 2, 0]);

    let tied = store_from(&[feature_for_margin(0.3), feature_for_margin(0.3)]);
    let order: Vec<SampleId> = uncertainty_select(&model, &[1, 0], &tied, 2)
        .unwrap()
        .iter()
        .map(|s| s.id)
        .collect();
    assert_eq!(order, vec![0, 1]);

    assert!(uncertainty_select(&model, &[], &store, 0).is_err());
}

#[test]
fn diversity_with_k_equal_n_returns_all_points() {
    let store = store_from(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let out = diversity_filter(&ids(4), &store, 4).unwrap();
    assert_eq!(out.ids, ids(4));
    assert!(out.outliers.is_empty());
}

#[test]
fn diversity_removes_far_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut feats: Vec<Vec<f64>> = (0..50)
        .map(|_| vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)])
        .collect();
    feats.push(vec![100.0, 100.0]);
    // direct check that the far point lies beyond mean + 3 std of distances
    let n = feats.len() as f64;
    let mean = [
        feats.iter().map(|f| f[0]).sum::<f64>() / n,
        feats.iter().map(|f| f[1]).sum::<f64>() / n,
    ];
    let d: Vec<f64> = feats.iter().map(|f| distance(f, &mean).unwrap()).collect();
    let mu = d.iter().sum::<f64>() / n;
    let sigma = (d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    assert!(d[50] > mu + 3.0 * sigma);
    assert!(d[..50].iter().all(|x| *x <= mu + 3.0 * sigma));

    let store = store_from(&feats);
    let out = diversity_filter(&ids(51), &store, 5).unwrap();
    assert_eq!(out.outliers, vec![50]);
    assert_eq!(out.ids.len(), 5);
    assert!(!out.ids.contains(&50));
}

#[test]
fn identical_candidates_collapse_to_one_medoid() {
    let store = store_from(&vec![vec![2.0, 2.0]; 6]);
    let out = diversity_filter(&ids(6), &store, 3).unwrap();
    assert_eq!(out.ids, vec![0]);
    assert!(diversity_filter(&[], &store, 1).is_err());
    assert!(diversity_filter(&ids(6), &store, 7).is_err());
}

/// Features are (position, confidence); the model's top probability grows
/// with the confidence coordinate only.
fn confidence_fixture() -> (DatasetStore, DetectorModel) {
    let store = store_from(&[vec![0.0, 3.0], vec![1.0, 0.0], vec![10.0, 0.0]]);
    let mut model = DetectorModel::new(2, 2).unwrap();
    model.set_class_row(0, &[0.0, 1.0, 0.0]).unwrap();
    (store, model)
}

#[test]
fn confidence_examples() {
    let (store, model) = confidence_fixture();
    let rule = MaxMin;
    assert_eq!(confidence_select(&model, &ids(3), &store, 1, &rule).unwrap(), vec![0]);
    assert_eq!(confidence_select(&model, &ids(3), &store, 2, &rule).unwrap(), vec![0, 2]);
    assert_eq!(confidence_select(&model, &ids(3), &store, 2, &MostSimilar).unwrap(), vec![0, 1]);
    assert!(confidence_select(&model, &[], &store, 1, &rule).is_err());
    assert!(confidence_select(&model, &ids(3), &store, 4, &rule).is_err());
}

#[test]
fn most_similar_walks_down_the_confidence_ranking() {
    // far apart in feature space, confidence coordinates 3, 0, 2, 1
    let store = store_from(&[vec![0.0, 3.0], vec![50.0, 0.0], vec![-40.0, 2.0], vec![90.0, 1.0]]);
    let mut model = DetectorModel::new(2, 2).unwrap();
    model.set_class_row(0, &[0.0, 1.0, 0.0]).unwrap();
    assert_eq!(confidence_select(&model, &ids(4), &store, 3, &MostSimilar).unwrap(), vec![0, 2, 3]);
    // max-min prefers the farthest points instead
    assert_eq!(confidence_select(&model, &ids(4), &store, 2, &MaxMin).unwrap(), vec![0, 3]);
}

/// Independent max-min greedy: recomputes every candidate's nearest-selected
/// distance from scratch at each step.
fn naive_max_min(model: &DetectorModel, store: &DatasetStore, pool: &[SampleId], gamma: usize) -> Vec<SampleId> {
    let mut sorted = pool.to_vec();
    sorted.sort();
    let f = |id: SampleId| store.get(id).unwrap().features.clone();
    let mut best = sorted[0];
    for &id in &sorted {
        if model.score(&f(id)).unwrap().f_x > model.score(&f(best)).unwrap().f_x {
            best = id;
        }
    }
    let mut chosen = vec![best];
    while chosen.len() < gamma {
        let mut pick: Option<(SampleId, f64)> = None;
        for &id in &sorted {
            if chosen.contains(&id) {
                continue;
            }
            let nearest = chosen
                .iter()
                .map(|&c| distance(&f(id), &f(c)).unwrap())
                .fold(f64::INFINITY, f64::min);
            if pick.is_none_or(|(_, d)| nearest > d) {
                pick = Some((id, nearest));
            }
        }
        chosen.push(pick.unwrap().0);
    }
    chosen
}

#[test]
fn confidence_matches_naive_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let dim = rng.random_range(1..=4);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let store = store_from(&feats);
        let model = random_model(&mut rng, 3, dim);
        let gamma = rng.random_range(1..=n);
        let fast = confidence_select(&model, &ids(n), &store, gamma, &MaxMin).unwrap();
        assert_eq!(fast, naive_max_min(&model, &store, &ids(n), gamma));
    }
}

fn request<'a>(
    model: &'a DetectorModel,
    store: &'a DatasetStore,
    pool: &'a [SampleId],
    params: SamplingParams,
    seed: u64,
) -> SelectionRequest<'a> {
    SelectionRequest {
        model,
        store,
        pool,
        params,
        confidence_rule: &MaxMin,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn selections_are_nested_and_deterministic(
        seed in 0u64..10_000,
        n in 1usize..80,
        u in 0.05f64..=1.0,
        d in 0.05f64..=1.0,
        c in 0.05f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_from(&mixture_pool(&mut rng, n, 4.0));
        let model = random_model(&mut rng, 3, 2);
        let pool = ids(n);
        let params = SamplingParams { u, d, c };
        let registry = SelectorRegistry::default();
        for name in ["collaborative", "uncertainty_only", "random"] {
            let sel = registry.get(name).unwrap();
            let a = sel.select(&request(&model, &store, &pool, params, seed)).unwrap();
            let b = sel.select(&request(&model, &store, &pool, params, seed)).unwrap();
            prop_assert!(a.is_nested(), "{name}");
            prop_assert_eq!(&a, &b);
            let counts = resolve_counts(&params, n);
            prop_assert_eq!(a.selected_ids.len(), counts.gamma.min(a.diversity_ids.len()));
        }
    }
}

fn mean_pairwise(store: &DatasetStore, ids: &[SampleId]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            sum += distance(store.features(a).unwrap(), store.features(b).unwrap()).unwrap();
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

#[test]
fn collaborative_batches_are_more_spread_than_random_subsets() {
    // u = 1 keeps the whole pool through the uncertainty stage; a partial
    // uncertainty cut gathers points along decision boundaries, which is
    // the opposite of spread
    let params = SamplingParams::new(1.0, 0.6, 0.8).unwrap();
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let store = store_from(&mixture_pool(&mut rng, 100, 1.5));
        let model = random_model(&mut rng, 4, 2);
        let pool = ids(100);
        let sel = Collaborative.select(&request(&model, &store, &pool, params, trial)).unwrap();
        let random: Vec<SampleId> = pool
            .choose_multiple(&mut rng, sel.selected_ids.len())
            .copied()
            .collect();
        if mean_pairwise(&store, &sel.selected_ids) >= mean_pairwise(&store, &random) {
            wins += 1;
        }
    }
    assert!(wins >= 90, "only {wins}/100 trials");
}

#[test]
fn registries_resolve_names() {
    let sel = SelectorRegistry::default();
    assert_eq!(sel.names().collect::<Vec<_>>(), vec!["collaborative", "random", "uncertainty_only"]);
    assert!(sel.get("committee").is_err());
    let rules = ConfidenceRuleRegistry::default();
    assert_eq!(rules.get("max_min").unwrap().name(), "max_min");
    assert!(rules.get("min_max").is_err());
}
