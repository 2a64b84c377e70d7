//! Offline scoring, either of a saved model against a dataset or of raw
//! detection and truth dumps.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iassl_core::eval::{flatten_truths, mean_ap_report, ApVariant, DetectionRecord, Evaluator, MapReport, TruthDump};
use iassl_core::model::Partition;

use super::run::ModelFile;
use super::{ensure_dir, read_json, write_json};
use crate::config::{hash_bytes, RunConfig};
use crate::error::{as_config, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Config hash, or a digest of the dumps for dump scoring.
    pub config_hash: String,
    pub variant: ApVariant,
    pub iou_thresh: f64,
    pub validation: Option<MapReport>,
    pub test: Option<MapReport>,
    /// Set for dump scoring.
    pub dumps: Option<MapReport>,
}

pub fn eval_model(config: &RunConfig, model_file: &Path) -> Result<EvalReport> {
    let file: ModelFile = read_json(model_file)?;
    let data = config.load_data()?;
    if file.model.dim() != data.store.dim() || file.model.num_classes() != data.num_classes {
        return Err(CliError::config(format!(
            "{}: model has {} classes over {} features, dataset has {} over {}",
            model_file.display(),
            file.model.num_classes(),
            file.model.dim(),
            data.num_classes,
            data.store.dim()
        )));
    }
    let evaluator = Evaluator::new(config.eval.variant, config.eval.iou_thresh);
    let score = |partition| -> Result<Option<MapReport>> {
        let ids = data.store.ids(partition);
        if ids.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluator.map_report(&file.model, &data.store, ids)?))
    };
    Ok(EvalReport {
        config_hash: file.config_hash,
        variant: config.eval.variant,
        iou_thresh: config.eval.iou_thresh,
        validation: score(Partition::Validation)?,
        test: score(Partition::Test)?,
        dumps: None,
    })
}

pub fn eval_dumps(detections: &Path, truths: &Path, variant: ApVariant, iou_thresh: f64) -> Result<EvalReport> {
    let dets: Vec<DetectionRecord> = read_json(detections)?;
    let dump: Vec<TruthDump> = read_json(truths)?;
    let truth = flatten_truths(&dump);
    let classes: Vec<usize> = truth.iter().map(|t| t.class_id).collect::<BTreeSet<_>>().into_iter().collect();
    let report = mean_ap_report(&dets, &truth, &classes, variant, iou_thresh).map_err(as_config("truth dump"))?;
    let digest = format!(
        "{}:{}:{variant:?}:{iou_thresh}",
        serde_json::to_string(&dets)?,
        serde_json::to_string(&dump)?
    );
    Ok(EvalReport {
        config_hash: hash_bytes(digest.as_bytes()),
        variant,
        iou_thresh,
        validation: None,
        test: None,
        dumps: Some(report),
    })
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<PathBuf> {
    ensure_dir(out)?;
    write_json(&out.join(format!("eval_{}.json", report.config_hash)), report)
}
