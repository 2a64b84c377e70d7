//! The batch / bin-cycle training loop.
//!
//! A run is a small state machine: initial training, then per phase a batch
//! selection, one accuracy-gated bin iteration per step, and a closing
//! retrain. [`LoopState`] holds everything needed to continue, so it doubles
//! as the checkpoint and a resumed run replays the remaining steps exactly.

mod bins;
mod curve;
mod oracle;

pub use bins::{make_bins, Bin, BinSequence, BinStatus};
pub use curve::{CurveRow, LearningCurve, CURVE_HEADER};
pub use oracle::{Oracle, OracleCounters, LOCALIZATION_IOU};

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{pseudo_label, train, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::{ApVariant, Evaluator, DEFAULT_IOU_THRESH};
use crate::model::{DatasetStore, GivenLabel, Partition, Provenance, SampleId, SamplingParams};
use crate::optim::OptimizerConfig;
use crate::sampling::{BatchSelection, ConfidenceRuleRegistry, SelectionRequest, SelectorRegistry};

pub const CHECKPOINT_VERSION: u32 = 1;

/// What happens to a rejected bin once the oracle has fixed its labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectedBin {
    /// Join the well-labeled set immediately.
    #[default]
    Merge,
    /// Go back into the pending queue once; a second rejection discards it.
    RetryOnce,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub phases: usize,
    pub bins: usize,
    pub pool_size: usize,
    pub bin_epochs: usize,
    pub initial_epochs: usize,
    /// Epochs of the end-of-phase retrain on the expanded well set; 0 skips it.
    pub retrain_epochs: usize,
    pub epsilon_phase: f64,
    pub corrected_bin: CorrectedBin,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            phases: 2,
            bins: 10,
            pool_size: 100,
            bin_epochs: 50,
            initial_epochs: 200,
            retrain_epochs: 50,
            epsilon_phase: 0.001,
            corrected_bin: CorrectedBin::Merge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub u: f64,
    pub d: f64,
    pub c: f64,
    pub confidence_rule: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            u: 0.8,
            d: 0.6,
            c: 0.8,
            confidence_rule: "max_min".into(),
        }
    }
}

impl SamplingConfig {
    pub fn params(&self) -> Result<SamplingParams> {
        SamplingParams::new(self.u, self.d, self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// With the oracle off, rejected bins are discarded unseen.
    pub enabled: bool,
    pub budget: Option<u64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            enabled: true,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub variant: ApVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: DEFAULT_IOU_THRESH,
            variant: ApVariant::ElevenPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IasslConfig {
    pub seed: u64,
    pub selector: String,
    pub sampling: SamplingConfig,
    pub optimizer: OptimizerConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    /// Fill `wall_time_ms`; off by default so curves are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for IasslConfig {
    fn default() -> Self {
        IasslConfig {
            seed: 0,
            selector: "collaborative".into(),
            sampling: SamplingConfig::default(),
            optimizer: OptimizerConfig::default(),
            loop_: LoopConfig::default(),
            oracle: OracleConfig::default(),
            eval: EvalConfig::default(),
            record_wall_time: false,
        }
    }
}

impl IasslConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.params()?;
        self.optimizer.validate()?;
        SelectorRegistry::default().get(&self.selector)?;
        ConfidenceRuleRegistry::default().get(&self.sampling.confidence_rule)?;
        let l = &self.loop_;
        if l.bins == 0 || l.pool_size == 0 {
            return Err(Error::invalid("loop.bins and loop.pool_size must be at least 1"));
        }
        if l.bin_epochs == 0 || l.initial_epochs == 0 {
            return Err(Error::invalid("loop.bin_epochs and loop.initial_epochs must be at least 1"));
        }
        if !(l.epsilon_phase.is_finite()) {
            return Err(Error::invalid("loop.epsilon_phase must be finite"));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::invalid("eval.iou_thresh must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    /// All configured phases ran.
    Completed,
    /// A phase improved accuracy by less than `epsilon_phase`.
    Converged,
    TentativeExhausted,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stage {
    Initial,
    PhaseStart,
    Bins,
    PhaseEnd,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub selection: BatchSelection,
    pub bins: BinSequence,
}

/// Complete resumable state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub version: u32,
    /// Splitmix64 state from which every training and sampling seed is drawn.
    pub rng_state: u64,
    pub phase: usize,
    stage: Stage,
    /// Bin iterations completed in the current phase.
    pub bin_cursor: usize,
    /// Last stream position already offered to a batch pool.
    pub stream_cursor: Option<SampleId>,
    pub num_classes: usize,
    pub model: Option<DetectorModel>,
    pub store: DatasetStore,
    pub acc: f64,
    pub phase_start_acc: f64,
    pub oracle: OracleCounters,
    pub curve: LearningCurve,
    pub phases: Vec<PhaseRecord>,
    pub status: RunStatus,
}

impl LoopState {
    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: DetectorModel,
    pub store: DatasetStore,
    pub curve: LearningCurve,
    pub phases: Vec<PhaseRecord>,
    pub status: RunStatus,
    pub oracle: OracleCounters,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct IasslRunner {
    config: IasslConfig,
    state: LoopState,
    evaluator: Evaluator,
    oracle: Oracle,
    selectors: SelectorRegistry,
    rules: ConfidenceRuleRegistry,
}

impl IasslRunner {
    pub fn new(store: DatasetStore, num_classes: usize, config: IasslConfig) -> Result<Self> {
        config.validate()?;
        store.check_invariants()?;
        if store.ids(Partition::Well).is_empty() {
            return Err(Error::Empty("well-labeled set"));
        }
        if store.ids(Partition::Validation).is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let state = LoopState {
            version: CHECKPOINT_VERSION,
            rng_state: config.seed,
            phase: 0,
            stage: Stage::Initial,
            bin_cursor: 0,
            stream_cursor: None,
            num_classes,
            model: None,
            store,
            acc: 0.0,
            phase_start_acc: 0.0,
            oracle: OracleCounters::default(),
            curve: LearningCurve::default(),
            phases: Vec::new(),
            status: RunStatus::Running,
        };
        Self::resume(state, config)
    }

    /// Continues from a checkpointed state.
    pub fn resume(state: LoopState, config: IasslConfig) -> Result<Self> {
        config.validate()?;
        if state.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                state.version
            )));
        }
        state.store.check_invariants()?;
        let mut oracle = Oracle::new(config.oracle.budget);
        oracle.counters = state.oracle;
        Ok(IasslRunner {
            evaluator: Evaluator::new(config.eval.variant, config.eval.iou_thresh),
            oracle,
            selectors: SelectorRegistry::default(),
            rules: ConfidenceRuleRegistry::default(),
            config,
            state,
        })
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    /// Truth reads made by the oracle and by validation scoring, the only
    /// two parties allowed to look.
    pub fn truth_reads(&self) -> (u64, u64) {
        (self.oracle.truth_reads(), self.evaluator.truth_reads())
    }

    pub fn run_to_end(mut self) -> Result<RunOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> RunOutcome {
        let s = self.state;
        RunOutcome {
            model: s.model.expect("a finished run has a model"),
            store: s.store,
            curve: s.curve,
            phases: s.phases,
            status: s.status,
            oracle: s.oracle,
        }
    }

    /// Advances the run by one unit of work.
    pub fn step(&mut self) -> Result<()> {
        match self.state.stage {
            Stage::Initial => self.initial(),
            Stage::PhaseStart => self.phase_start(),
            Stage::Bins => self.bin_iteration(),
            Stage::PhaseEnd => self.phase_end(),
            Stage::Done => Ok(()),
        }
    }

    fn next_seed(&mut self) -> u64 {
        splitmix64(&mut self.state.rng_state)
    }

    fn optimizer(&mut self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.next_seed(),
            ..self.config.optimizer.clone()
        }
    }

    fn validation_acc(&self, model: &DetectorModel) -> Result<f64> {
        self.evaluator.map(model, &self.state.store, self.state.store.ids(Partition::Validation))
    }

    fn model(&self) -> &DetectorModel {
        self.state.model.as_ref().expect("model exists after initial training")
    }

    fn push_row(&mut self, mut row: CurveRow, started: Instant) {
        row.d_well_size = self.state.store.ids(Partition::Well).len();
        row.d_tentative_size = self.state.store.ids(Partition::Tentative).len();
        row.wall_time_ms = if self.config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.state.curve.rows.push(row);
    }

    fn row(&self, bin_index: Option<usize>, candidate: Option<usize>, accepted: bool, before: f64, after: f64) -> CurveRow {
        CurveRow {
            phase: self.state.phase,
            bin_index,
            candidate_bin_id: candidate,
            accepted,
            acc_before: before,
            acc_after: after,
            oracle_inspections: 0,
            oracle_corrections: 0,
            d_well_size: 0,
            d_tentative_size: 0,
            wall_time_ms: 0,
        }
    }

    fn finish(&mut self, status: RunStatus) {
        self.state.status = status;
        self.state.stage = Stage::Done;
    }

    fn initial(&mut self) -> Result<()> {
        let started = Instant::now();
        let store = &self.state.store;
        for &id in store.ids(Partition::Well) {
            let class = store.get(id)?.given_label.ok_or(Error::Unlabeled(id))?.class;
            if class >= self.state.num_classes {
                return Err(Error::invalid(format!(
                    "sample {id} has class {class} but the run has {} classes",
                    self.state.num_classes
                )));
            }
        }
        let opt = self.optimizer();
        let init = DetectorModel::new(self.state.num_classes, self.state.store.dim())?;
        let well = self.state.store.ids(Partition::Well).clone();
        let model = train(&init, &well, &self.state.store, &opt, self.config.loop_.initial_epochs)?;
        let acc = self.validation_acc(&model)?;
        self.state.model = Some(model);
        self.state.acc = acc;
        let row = self.row(None, None, true, acc, acc);
        self.push_row(row, started);
        self.state.phase = 1;
        self.state.stage = Stage::PhaseStart;
        Ok(())
    }

    fn phase_start(&mut self) -> Result<()> {
        if self.state.phase > self.config.loop_.phases {
            self.finish(RunStatus::Completed);
            return Ok(());
        }
        let after = self.state.stream_cursor;
        let pool: Vec<SampleId> = self
            .state
            .store
            .ids(Partition::Tentative)
            .iter()
            .copied()
            .filter(|&id| after.is_none_or(|c| id > c))
            .take(self.config.loop_.pool_size)
            .collect();
        let Some(&last) = pool.last() else {
            self.finish(RunStatus::TentativeExhausted);
            return Ok(());
        };

        let seed = self.next_seed();
        let params = self.config.sampling.params()?;
        let selection = {
            let request = SelectionRequest {
                model: self.model(),
                store: &self.state.store,
                pool: &pool,
                params,
                confidence_rule: self.rules.get(&self.config.sampling.confidence_rule)?,
                seed,
            };
            self.selectors.get(&self.config.selector)?.select(&request)?
        };
        let selected: BTreeSet<SampleId> = selection.selected_ids.iter().copied().collect();
        let model = self.state.model.take().expect("model exists after initial training");
        let labeled = pseudo_label(&model, &selected, &mut self.state.store);
        self.state.model = Some(model);
        labeled?;
        let bins = make_bins(&selection.selected_ids, &self.state.store, self.config.loop_.bins)?;

        self.state.phases.push(PhaseRecord {
            phase: self.state.phase,
            selection,
            bins,
        });
        self.state.stream_cursor = Some(last);
        self.state.phase_start_acc = self.state.acc;
        self.state.bin_cursor = 0;
        self.state.stage = Stage::Bins;
        Ok(())
    }

    fn bin_iteration(&mut self) -> Result<()> {
        let started = Instant::now();
        let opt = self.optimizer();
        let settings = CycleSettings {
            epochs: self.config.loop_.bin_epochs,
            corrected_bin: self.config.loop_.corrected_bin,
            oracle_enabled: self.config.oracle.enabled,
        };
        let state = &mut self.state;
        let step = bin_iteration(
            state.model.as_mut().expect("model exists after initial training"),
            &mut state.acc,
            &mut state.phases.last_mut().expect("a phase is open").bins,
            &mut state.store,
            &mut self.oracle,
            &self.evaluator,
            &opt,
            &settings,
        )?;
        self.state.oracle = self.oracle.counters;
        let Some(it) = step else {
            self.state.stage = Stage::PhaseEnd;
            return Ok(());
        };
        let mut row = self.row(Some(self.state.bin_cursor), Some(it.bin), it.accepted, it.acc_before, it.acc_after);
        row.oracle_inspections = it.spent.inspections;
        row.oracle_corrections = it.spent.corrections;
        self.push_row(row, started);
        self.state.bin_cursor += 1;
        if it.budget_exhausted {
            self.finish(RunStatus::BudgetExhausted);
        }
        Ok(())
    }

    fn phase_end(&mut self) -> Result<()> {
        let started = Instant::now();
        if self.config.loop_.retrain_epochs > 0 {
            let opt = self.optimizer();
            let well = self.state.store.ids(Partition::Well).clone();
            let model = train(self.model(), &well, &self.state.store, &opt, self.config.loop_.retrain_epochs)?;
            let acc = self.validation_acc(&model)?;
            let before = self.state.acc;
            let adopted = acc >= before;
            if adopted {
                self.state.model = Some(model);
                self.state.acc = acc;
            }
            let row = self.row(None, None, adopted, before, self.state.acc);
            self.push_row(row, started);
        }
        let gain = self.state.acc - self.state.phase_start_acc;
        self.state.phase += 1;
        self.state.bin_cursor = 0;
        if self.state.phase > self.config.loop_.phases {
            self.finish(RunStatus::Completed);
        } else if gain < self.config.loop_.epsilon_phase {
            self.finish(RunStatus::Converged);
        } else {
            self.state.stage = Stage::PhaseStart;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSettings {
    pub epochs: usize,
    pub corrected_bin: CorrectedBin,
    pub oracle_enabled: bool,
}

/// Result of consuming one bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iteration {
    pub bin: usize,
    pub accepted: bool,
    pub acc_before: f64,
    pub acc_after: f64,
    pub spent: OracleCounters,
    /// The oracle ran out of budget part-way through this bin.
    pub budget_exhausted: bool,
}

/// One accuracy-gated bin iteration. Trains a warm-started candidate on
/// `d_well ∪ bin` for every pending bin, takes the best (lowest index on
/// ties) and accepts it when validation accuracy does not drop; otherwise
/// the oracle checks the bin and the corrected-bin policy decides its fate
/// while `model` stays as it was. Returns `None` once no bin is pending.
#[allow(clippy::too_many_arguments)]
pub fn bin_iteration(
    model: &mut DetectorModel,
    acc: &mut f64,
    bins: &mut BinSequence,
    store: &mut DatasetStore,
    oracle: &mut Oracle,
    evaluator: &Evaluator,
    opt: &OptimizerConfig,
    settings: &CycleSettings,
) -> Result<Option<Iteration>> {
    let pending = bins.pending();
    if pending.is_empty() {
        return Ok(None);
    }
    let candidates: Vec<(DetectorModel, f64)> = {
        let store = &*store;
        let well = store.ids(Partition::Well);
        let validation = store.ids(Partition::Validation);
        let current = &*model;
        let bins = &*bins;
        pending
            .par_iter()
            .map(|&b| {
                let mut ids = well.clone();
                ids.extend(bins.bins[b].ids.iter().copied());
                let candidate = train(current, &ids, store, opt, settings.epochs)?;
                let acc = evaluator.map(&candidate, store, validation)?;
                Ok((candidate, acc))
            })
            .collect::<Result<_>>()?
    };

    // strict comparison keeps the lowest bin index on ties
    let mut best = 0;
    for (i, (_, a)) in candidates.iter().enumerate() {
        if *a > candidates[best].1 {
            best = i;
        }
    }
    let bin = pending[best];
    let before = *acc;
    let (candidate, cand_acc) = candidates.into_iter().nth(best).expect("best indexes candidates");
    let ids: BTreeSet<SampleId> = bins.bins[bin].ids.iter().copied().collect();
    let mut it = Iteration {
        bin,
        accepted: false,
        acc_before: before,
        acc_after: before,
        spent: OracleCounters::default(),
        budget_exhausted: false,
    };

    if cand_acc >= before {
        store.promote(&ids, Partition::Tentative, Partition::Well)?;
        *model = candidate;
        *acc = cand_acc;
        bins.bins[bin].status = BinStatus::Accepted;
        it.accepted = true;
        it.acc_after = cand_acc;
        return Ok(Some(it));
    }

    if bins.bins[bin].inspected || !settings.oracle_enabled {
        bins.bins[bin].status = BinStatus::Discarded;
        return Ok(Some(it));
    }

    let start = oracle.counters;
    for &id in &ids {
        let (truth, _) = match oracle.inspect(store.get(id)?) {
            Ok(v) => v,
            Err(Error::BudgetExhausted(_)) => {
                it.budget_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let sample = store.get_mut(id)?;
        sample.given_label = Some(GivenLabel {
            class: truth.class,
            bbox: truth.bbox,
            provenance: Provenance::Oracle,
        });
        sample.pseudo_score = None;
    }
    it.spent = OracleCounters {
        inspections: oracle.counters.inspections - start.inspections,
        corrections: oracle.counters.corrections - start.corrections,
    };
    if it.budget_exhausted {
        return Ok(Some(it));
    }
    let entry = &mut bins.bins[bin];
    entry.inspected = true;
    match settings.corrected_bin {
        CorrectedBin::Merge => {
            entry.status = BinStatus::Corrected;
            store.promote(&ids, Partition::Tentative, Partition::Well)?;
        }
        CorrectedBin::RetryOnce => entry.status = BinStatus::Pending,
        CorrectedBin::Discard => entry.status = BinStatus::Discarded,
    }
    Ok(Some(it))
}

/// Consumes bins until none is pending or the oracle budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn bin_cycle(
    model: &mut DetectorModel,
    acc: &mut f64,
    bins: &mut BinSequence,
    store: &mut DatasetStore,
    oracle: &mut Oracle,
    evaluator: &Evaluator,
    opt: &OptimizerConfig,
    settings: &CycleSettings,
) -> Result<Vec<Iteration>> {
    let mut out = Vec::new();
    while let Some(it) = bin_iteration(model, acc, bins, store, oracle, evaluator, opt, settings)? {
        out.push(it);
        if it.budget_exhausted {
            break;
        }
    }
    Ok(out)
}

/// Runs the whole loop from initial training to a stop condition.
pub fn run_iassl(store: DatasetStore, num_classes: usize, config: &IasslConfig) -> Result<RunOutcome> {
    IasslRunner::new(store, num_classes, config.clone())?.run_to_end()
}

#[cfg(test)]
mod tests;
