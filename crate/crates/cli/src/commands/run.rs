//! Single runs: execution, per-phase checkpoints and the files a run leaves
//! behind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iassl_core::active_loop::{IasslRunner, LearningCurve, LoopState, PhaseRecord, RunStatus};
use iassl_core::detector::DetectorModel;
use iassl_core::eval::Evaluator;
use iassl_core::model::{DatasetStore, Partition};
use iassl_core::sampling::StageAudit;

use super::{create, ensure_dir, finish, read_json, write_json};
use crate::config::{RunConfig, Strategy};
use crate::error::{as_config, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub u: f64,
    pub d: f64,
    pub c: f64,
    pub confidence_rule: String,
    pub status: RunStatus,
    pub initial_val_map: f64,
    pub final_val_map: f64,
    /// Absent when the dataset has no test partition.
    pub initial_test_map: Option<f64>,
    pub final_test_map: Option<f64>,
    pub inspections: u64,
    pub corrections: u64,
    pub d_well_start: usize,
    pub d_well_end: usize,
    pub bin_rows: usize,
}

/// On-disk checkpoint: the loop state plus what the summary needs from
/// before the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub initial_test_map: Option<f64>,
    pub state: LoopState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub config_hash: String,
    pub model: DetectorModel,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditFile<'a> {
    pub config_hash: &'a str,
    pub strategy: Strategy,
    pub params: AuditParams<'a>,
    pub batches: Vec<AuditBatch<'a>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditParams<'a> {
    pub u: f64,
    pub d: f64,
    pub c: f64,
    pub confidence_rule: &'a str,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditBatch<'a> {
    pub phase: usize,
    pub pool_ids: &'a [u64],
    pub selected_ids: &'a [u64],
    pub stages: &'a [StageAudit],
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config_hash: String,
    pub summary: RunSummary,
    pub curve: LearningCurve,
    pub model: DetectorModel,
    pub phases: Vec<PhaseRecord>,
}

impl RunArtifacts {
    pub fn halted(&self) -> bool {
        self.summary.status == RunStatus::BudgetExhausted
    }
}

/// Executes a run, optionally from a checkpoint. `on_phase` sees a
/// checkpoint each time a phase closes.
pub fn execute(
    config: &RunConfig,
    resume: Option<Checkpoint>,
    mut on_phase: impl FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<RunArtifacts> {
    let hash = config.hash();
    let data = config.load_data()?;
    let core = config.core_config();
    let evaluator = Evaluator::new(core.eval.variant, core.eval.iou_thresh);
    let test_ids = data.store.ids(Partition::Test).clone();
    let test_map = |model: &DetectorModel, store: &DatasetStore| -> Result<Option<f64>> {
        if test_ids.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluator.map(model, store, &test_ids)?))
    };

    let (mut runner, mut initial_test_map) = match resume {
        Some(cp) => {
            if cp.config_hash != hash {
                return Err(CliError::config(format!(
                    "checkpoint was written by config {} but this config hashes to {hash}",
                    cp.config_hash
                )));
            }
            let runner = IasslRunner::resume(cp.state, core).map_err(as_config("checkpoint"))?;
            (runner, cp.initial_test_map)
        }
        None => (
            IasslRunner::new(data.store, data.num_classes, core).map_err(as_config("run setup"))?,
            None,
        ),
    };

    while !runner.is_done() {
        let phase = runner.state().phase;
        let rows = runner.state().curve.rows.len();
        runner.step()?;
        let state = runner.state();
        if rows == 0 && !state.curve.rows.is_empty() {
            let model = state.model.as_ref().expect("initial training produced a model");
            initial_test_map = test_map(model, &state.store)?;
        }
        if phase >= 1 && state.phase > phase {
            let checkpoint = Checkpoint {
                config_hash: hash.clone(),
                initial_test_map,
                state: state.clone(),
            };
            on_phase(phase, &checkpoint)?;
        }
    }

    let outcome = runner.into_outcome();
    let curve = outcome.curve;
    let first = curve.rows.first().expect("a finished run has an initial row");
    let summary = RunSummary {
        config_hash: hash.clone(),
        strategy: config.strategy,
        seed: config.seed,
        u: config.sampling.u,
        d: config.sampling.d,
        c: config.sampling.c,
        confidence_rule: config.sampling.confidence_rule.clone(),
        status: outcome.status,
        initial_val_map: first.acc_after,
        final_val_map: curve.final_acc().unwrap_or(first.acc_after),
        initial_test_map,
        final_test_map: test_map(&outcome.model, &outcome.store)?,
        inspections: outcome.oracle.inspections,
        corrections: outcome.oracle.corrections,
        d_well_start: first.d_well_size,
        d_well_end: outcome.store.ids(Partition::Well).len(),
        bin_rows: curve.rows.iter().filter(|r| r.bin_index.is_some()).count(),
    };
    Ok(RunArtifacts {
        config_hash: hash,
        summary,
        curve,
        model: outcome.model,
        phases: outcome.phases,
    })
}

pub fn curve_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("curve_{hash}.csv"))
}

pub fn summary_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("summary_{hash}.json"))
}

pub fn model_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("model_{hash}.json"))
}

pub fn audit_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("audit_{hash}.json"))
}

pub fn checkpoint_path(dir: &Path, phase: usize, hash: &str) -> PathBuf {
    dir.join(format!("checkpoint_phase{phase}_{hash}.json"))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, checkpoint)?;
    finish(path, w)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

/// Writes curve, model, summary and audit files; returns their paths.
pub fn write_outputs(dir: &Path, config: &RunConfig, run: &RunArtifacts) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let hash = &run.config_hash;
    let curve = curve_path(dir, hash);
    let mut w = create(&curve)?;
    run.curve.write_csv(&mut w)?;
    finish(&curve, w)?;

    let model = write_json(
        &model_path(dir, hash),
        &ModelFile {
            config_hash: hash.clone(),
            model: run.model.clone(),
        },
    )?;
    let summary = write_json(&summary_path(dir, hash), &run.summary)?;
    let audit = AuditFile {
        config_hash: hash,
        strategy: config.strategy,
        params: AuditParams {
            u: config.sampling.u,
            d: config.sampling.d,
            c: config.sampling.c,
            confidence_rule: &config.sampling.confidence_rule,
        },
        batches: run
            .phases
            .iter()
            .map(|p| AuditBatch {
                phase: p.phase,
                pool_ids: &p.selection.pool_ids,
                selected_ids: &p.selection.selected_ids,
                stages: &p.selection.audit,
            })
            .collect(),
    };
    let audit = write_json(&audit_path(dir, hash), &audit)?;
    Ok(vec![curve, model, summary, audit])
}

/// `iassl run`: executes, checkpointing each phase into `out`.
pub fn cmd_run(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunArtifacts> {
    ensure_dir(out)?;
    let checkpoint = resume.map(read_checkpoint).transpose()?;
    let run = execute(config, checkpoint, |phase, cp| {
        write_checkpoint(&checkpoint_path(out, phase, &cp.config_hash), cp)
    })?;
    write_outputs(out, config, &run)?;
    Ok(run)
}
