use super::*;
use crate::data::{generate, GenSpec, Splits};
use crate::model::{Label, Sample, TruthAccess, TruthRole};

fn spec(seed: u64, separation: f64, splits: Splits) -> GenSpec {
    let mut s = GenSpec::gaussian_mixture(seed, 4, &[0.25; 4], separation, 1.0, 3);
    s.n_total = 600;
    s.splits = splits;
    s
}

fn default_splits() -> Splits {
    Splits {
        well: 0.05,
        tentative: 0.65,
        validation: 0.15,
        test: 0.15,
    }
}

fn fast_config() -> IasslConfig {
    let mut c = IasslConfig::default();
    c.loop_.initial_epochs = 60;
    c.loop_.bin_epochs = 10;
    c.loop_.retrain_epochs = 10;
    c.loop_.epsilon_phase = -1.0;
    c.optimizer.lr = 0.01;
    c
}

fn curve_bytes(curve: &LearningCurve) -> Vec<u8> {
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn empty_tentative_is_initial_training_only() {
    let splits = Splits {
        well: 0.2,
        tentative: 0.0,
        validation: 0.4,
        test: 0.4,
    };
    let store = generate(&spec(1, 3.0, splits)).unwrap();
    let out = run_iassl(store, 4, &fast_config()).unwrap();
    assert_eq!(out.curve.rows.len(), 1);
    assert_eq!(out.status, RunStatus::TentativeExhausted);
    assert_eq!(out.curve.rows[0].phase, 0);
    assert!(out.curve.rows[0].bin_index.is_none());
}

#[test]
fn missing_sets_are_errors() {
    let store = generate(&spec(1, 3.0, Splits {
        well: 0.0,
        tentative: 0.7,
        validation: 0.15,
        test: 0.15,
    }))
    .unwrap();
    assert!(run_iassl(store, 4, &fast_config()).is_err());
    let store = generate(&spec(1, 3.0, Splits {
        well: 0.1,
        tentative: 0.9,
        validation: 0.0,
        test: 0.0,
    }))
    .unwrap();
    assert!(run_iassl(store, 4, &fast_config()).is_err());
}

#[test]
fn two_phase_bookkeeping() {
    let store = generate(&spec(2, 2.0, default_splits())).unwrap();
    let well0 = store.ids(Partition::Well).len();
    let total0 = well0 + store.ids(Partition::Tentative).len();
    let out = run_iassl(store, 4, &fast_config()).unwrap();

    let bin_rows: Vec<&CurveRow> = out.curve.rows.iter().filter(|r| r.bin_index.is_some()).collect();
    assert!(bin_rows.len() <= 20);
    assert_eq!(out.phases.len(), 2);
    assert_eq!(out.status, RunStatus::Completed);

    let mut consumed = 0;
    let mut inspected = 0;
    for p in &out.phases {
        // the merge policy consumes exactly one bin per iteration
        assert_eq!(bin_rows.iter().filter(|r| r.phase == p.phase).count(), p.bins.len());
        assert_eq!(p.selection.selected_ids.len(), 39);
        for b in &p.bins.bins {
            assert_ne!(b.status, BinStatus::Pending);
            if matches!(b.status, BinStatus::Accepted | BinStatus::Corrected) {
                consumed += b.ids.len();
            }
            if b.inspected {
                inspected += b.ids.len() as u64;
            }
        }
    }
    assert_eq!(out.store.ids(Partition::Well).len(), well0 + consumed);
    assert_eq!(out.store.ids(Partition::Well).len() + out.store.ids(Partition::Tentative).len(), total0);
    assert_eq!(out.oracle.inspections, inspected);
    assert_eq!(out.curve.total_inspections(), inspected);
    assert!(out.oracle.corrections <= out.oracle.inspections);

    let mut last_well = 0;
    for r in &out.curve.rows {
        if r.accepted {
            assert!(r.acc_after >= r.acc_before);
        } else {
            assert_eq!(r.acc_after, r.acc_before);
            if r.bin_index.is_some() {
                assert_eq!(r.d_well_size - last_well, r.oracle_inspections as usize);
            }
        }
        assert!(r.d_well_size >= last_well);
        last_well = r.d_well_size;
    }
    out.store.check_invariants().unwrap();
}

#[test]
fn clean_separable_stream_is_accepted_for_free() {
    let mut s = spec(3, 30.0, default_splits());
    s.classes.iter_mut().for_each(|c| c.cov_scale = 0.05);
    let store = generate(&s).unwrap();
    let mut config = fast_config();
    config.loop_.initial_epochs = 300;
    let out = run_iassl(store, 4, &config).unwrap();
    assert_eq!(out.curve.rows[0].acc_after, 1.0);
    assert!(out.curve.rows.iter().all(|r| r.accepted));
    assert_eq!(out.oracle, OracleCounters::default());
}

/// Trained model and store with one tentative bin whose labels are all wrong.
fn mislabeled_bin_fixture(initial_epochs: usize) -> (DetectorModel, f64, BinSequence, DatasetStore, Evaluator, OptimizerConfig) {
    let splits = Splits {
        well: 0.1,
        tentative: 0.5,
        validation: 0.4,
        test: 0.0,
    };
    let mut store = generate(&spec(4, 4.0, splits)).unwrap();
    let opt = OptimizerConfig {
        lr: 0.01,
        ..Default::default()
    };
    let well = store.ids(Partition::Well).clone();
    let init = DetectorModel::new(4, 4).unwrap();
    let model = train(&init, &well, &store, &opt, initial_epochs).unwrap();
    let evaluator = Evaluator::default();
    let acc = evaluator.map(&model, &store, store.ids(Partition::Validation)).unwrap();

    let auditor = TruthAccess::new(TruthRole::Auditor);
    let ids: Vec<SampleId> = store.ids(Partition::Tentative).iter().copied().collect();
    for &id in &ids {
        let s = store.get_mut(id).unwrap();
        let t = *s.truth(&auditor).unwrap();
        s.given_label = Some(GivenLabel {
            class: (t.class + 1) % 4,
            bbox: t.bbox,
            provenance: Provenance::Pseudo,
        });
        s.pseudo_score = Some(0.5);
    }
    let bins = BinSequence {
        bins: vec![Bin {
            ids,
            status: BinStatus::Pending,
            inspected: false,
        }],
    };
    (model, acc, bins, store, evaluator, opt)
}

fn settings(policy: CorrectedBin) -> CycleSettings {
    CycleSettings {
        epochs: 20,
        corrected_bin: policy,
        oracle_enabled: true,
    }
}

#[test]
fn mislabeled_bin_goes_to_the_oracle() {
    let (mut model, mut acc, mut bins, mut store, evaluator, opt) = mislabeled_bin_fixture(200);
    let before_model = model.clone();
    let before_acc = acc;
    let n = bins.bins[0].ids.len() as u64;
    let well0 = store.ids(Partition::Well).len();
    let mut oracle = Oracle::new(None);
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::Merge)).unwrap();
    assert_eq!(its.len(), 1);
    assert!(!its[0].accepted);
    assert_eq!(its[0].spent, OracleCounters { inspections: n, corrections: n });
    assert_eq!(model, before_model);
    assert_eq!(acc, before_acc);
    assert_eq!(bins.bins[0].status, BinStatus::Corrected);
    assert_eq!(store.ids(Partition::Well).len(), well0 + n as usize);
    let fixed = store.get(bins.bins[0].ids[0]).unwrap().given_label.unwrap();
    assert_eq!(fixed.provenance, Provenance::Oracle);
    assert_eq!(oracle.truth_reads(), n);
}

#[test]
fn corrected_bin_policies() {
    let (mut model, mut acc, mut bins, mut store, evaluator, opt) = mislabeled_bin_fixture(200);
    let well0 = store.ids(Partition::Well).len();
    let mut oracle = Oracle::new(None);
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::Discard)).unwrap();
    assert_eq!(its.len(), 1);
    assert_eq!(bins.bins[0].status, BinStatus::Discarded);
    assert_eq!(store.ids(Partition::Well).len(), well0);

    let (mut model, mut acc, mut bins, mut store, evaluator, opt) = mislabeled_bin_fixture(200);
    let mut oracle = Oracle::new(None);
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::RetryOnce)).unwrap();
    // rejected and corrected, then retried with oracle labels
    assert_eq!(its.len(), 2);
    assert_eq!(its[0].spent.inspections, bins.bins[0].ids.len() as u64);
    assert_eq!(its[1].spent, OracleCounters::default());
    let expect = if its[1].accepted { BinStatus::Accepted } else { BinStatus::Discarded };
    assert_eq!(bins.bins[0].status, expect);
}

#[test]
fn budget_stops_mid_bin() {
    let (mut model, mut acc, mut bins, mut store, evaluator, opt) = mislabeled_bin_fixture(200);
    let well0 = store.ids(Partition::Well).len();
    let mut oracle = Oracle::new(Some(3));
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::Merge)).unwrap();
    assert_eq!(its.len(), 1);
    assert!(its[0].budget_exhausted);
    assert_eq!(its[0].spent.inspections, 3);
    assert_eq!(bins.bins[0].status, BinStatus::Pending);
    assert_eq!(store.ids(Partition::Well).len(), well0);
}

#[test]
fn improving_bin_is_accepted() {
    let (mut model, mut acc, mut bins, mut store, evaluator, opt) = mislabeled_bin_fixture(1);
    // restore correct labels so the bin helps a barely trained model
    let auditor = TruthAccess::new(TruthRole::Auditor);
    for &id in &bins.bins[0].ids {
        let s = store.get_mut(id).unwrap();
        let t = *s.truth(&auditor).unwrap();
        s.given_label = Some(GivenLabel {
            class: t.class,
            bbox: t.bbox,
            provenance: Provenance::Pseudo,
        });
    }
    let n = bins.bins[0].ids.len();
    let well0 = store.ids(Partition::Well).len();
    let before = acc;
    let mut oracle = Oracle::new(None);
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::Merge)).unwrap();
    assert_eq!(its.len(), 1);
    assert!(its[0].accepted);
    assert!(acc > before);
    assert_eq!(store.ids(Partition::Well).len(), well0 + n);
    assert_eq!(oracle.counters, OracleCounters::default());
}

#[test]
fn empty_bin_sequence_is_a_no_op() {
    let (mut model, mut acc, _, mut store, evaluator, opt) = mislabeled_bin_fixture(5);
    let snapshot = (model.clone(), acc, store.clone());
    let mut bins = BinSequence::default();
    let mut oracle = Oracle::new(None);
    let its = bin_cycle(&mut model, &mut acc, &mut bins, &mut store, &mut oracle, &evaluator, &opt, &settings(CorrectedBin::Merge)).unwrap();
    assert!(its.is_empty());
    assert_eq!((model, acc, store), snapshot);
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let store = generate(&spec(5, 2.0, default_splits())).unwrap();
    let config = fast_config();
    let full = run_iassl(store.clone(), 4, &config).unwrap();
    let again = run_iassl(store.clone(), 4, &config).unwrap();
    assert_eq!(curve_bytes(&full.curve), curve_bytes(&again.curve));

    for stop_after in [1, 2, 5, 13] {
        let mut runner = IasslRunner::new(store.clone(), 4, config.clone()).unwrap();
        for _ in 0..stop_after {
            runner.step().unwrap();
        }
        let json = serde_json::to_string(runner.state()).unwrap();
        drop(runner);
        let state: LoopState = serde_json::from_str(&json).unwrap();
        let resumed = IasslRunner::resume(state, config.clone()).unwrap().run_to_end().unwrap();
        assert_eq!(curve_bytes(&resumed.curve), curve_bytes(&full.curve), "stop after {stop_after}");
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.store, full.store);
    }
}

#[test]
fn learner_sees_truth_only_through_oracle_and_evaluator() {
    let store = generate(&spec(6, 2.0, default_splits())).unwrap();
    let config = fast_config();
    let mut runner = IasslRunner::new(store.clone(), 4, config.clone()).unwrap();
    while !runner.is_done() {
        runner.step().unwrap();
    }
    let (oracle_reads, eval_reads) = runner.truth_reads();
    let state = runner.state().clone();
    assert_eq!(oracle_reads, state.oracle.inspections);
    // one validation pass per candidate, plus initial training and retrains
    let n_val = store.ids(Partition::Validation).len() as u64;
    let candidates: usize = state
        .phases
        .iter()
        .map(|p| {
            let n = p.bins.len();
            n * (n + 1) / 2
        })
        .sum();
    let retrains = state.curve.rows.iter().filter(|r| r.phase > 0 && r.bin_index.is_none()).count();
    assert_eq!(eval_reads, n_val * (1 + candidates + retrains) as u64);

    // with the oracle off, scrambling every non-validation truth changes nothing
    let mut off = config.clone();
    off.oracle.enabled = false;
    let reference = run_iassl(store.clone(), 4, &off).unwrap();
    let auditor = TruthAccess::new(TruthRole::Auditor);
    let mut scrambled = DatasetStore::new(store.dim());
    for s in store.samples() {
        let p = store.partition_of(s.id).unwrap();
        let truth = if p == Partition::Validation {
            *s.truth(&auditor).unwrap()
        } else {
            Label {
                class: 3,
                bbox: crate::model::BoundingBox::new(0.9, 0.9, 0.1, 0.1).unwrap(),
            }
        };
        let mut copy = Sample::new(s.id, s.features.clone(), Some(truth));
        copy.given_label = s.given_label;
        scrambled.insert(copy, p).unwrap();
    }
    let blind = run_iassl(scrambled, 4, &off).unwrap();
    assert_eq!(curve_bytes(&blind.curve), curve_bytes(&reference.curve));
    assert_eq!(reference.oracle, OracleCounters::default());
}

#[test]
fn config_validation() {
    let mut c = IasslConfig::default();
    c.selector = "committee".into();
    assert!(matches!(c.validate(), Err(Error::UnknownStrategy { .. })));
    let mut c = IasslConfig::default();
    c.sampling.u = 0.0;
    assert!(c.validate().is_err());
    let mut c = IasslConfig::default();
    c.loop_.bins = 0;
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&IasslConfig::default()).unwrap();
    assert!(json.contains("\"loop\""));
    let back: IasslConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, IasslConfig::default());
    assert!(serde_json::from_str::<IasslConfig>(r#"{"lop": {}}"#).is_err());
}
