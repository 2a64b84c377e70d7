//! Aggregates run summaries found under a directory and emits plot data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iassl_core::active_loop::LearningCurve;

use super::run::{curve_path, RunSummary};
use super::{create, ensure_dir, finish, read_json, write_json};
use crate::config::{hash_bytes, Strategy};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dir: PathBuf,
    #[serde(flatten)]
    pub summary: RunSummary,
    /// Why the run is left out of the aggregates, if it is.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample variance; zero for a single run.
    pub variance: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = if values.len() < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        Some(Stat { mean, variance })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub u: f64,
    pub d: f64,
    pub c: f64,
    pub confidence_rule: String,
    pub runs: usize,
    pub final_val_map: Stat,
    pub final_test_map: Option<Stat>,
    /// Final minus initial validation mAP.
    pub val_gain: Stat,
    pub inspections: Stat,
    pub corrections: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_hash: String,
    pub runs: Vec<RunEntry>,
    pub aggregates: Vec<Aggregate>,
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_summaries(&path, found)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("summary_") && n.ends_with(".json"))
        {
            found.push(path);
        }
    }
    Ok(())
}

pub fn build_report(runs_dir: &Path) -> Result<Report> {
    if !runs_dir.is_dir() {
        return Err(CliError::config(format!("{} is not a directory", runs_dir.display())));
    }
    let mut paths = Vec::new();
    find_summaries(runs_dir, &mut paths)?;
    if paths.is_empty() {
        return Err(CliError::config(format!("no run summaries under {}", runs_dir.display())));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for path in paths {
        let summary: RunSummary = read_json(&path)?;
        let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let flag = (!curve_path(&dir, &summary.config_hash).is_file()).then(|| "missing curve file".to_string());
        runs.push(RunEntry { dir, summary, flag });
    }

    type Key = (Strategy, u64, u64, u64, String);
    let mut groups: BTreeMap<Key, Vec<&RunSummary>> = BTreeMap::new();
    for entry in runs.iter().filter(|r| r.flag.is_none()) {
        let s = &entry.summary;
        let key = (s.strategy, s.u.to_bits(), s.d.to_bits(), s.c.to_bits(), s.confidence_rule.clone());
        groups.entry(key).or_default().push(s);
    }
    // keys order by strategy, then by parameter bits, which for these
    // non-negative values is numeric order
    let aggregates: Vec<Aggregate> = groups
        .into_values()
        .map(|group| {
            let stat = |f: &dyn Fn(&RunSummary) -> f64| {
                Stat::of(&group.iter().map(|s| f(s)).collect::<Vec<_>>()).expect("groups are non-empty")
            };
            let tests: Option<Vec<f64>> = group.iter().map(|s| s.final_test_map).collect();
            let first = group[0];
            Aggregate {
                strategy: first.strategy,
                u: first.u,
                d: first.d,
                c: first.c,
                confidence_rule: first.confidence_rule.clone(),
                runs: group.len(),
                final_val_map: stat(&|s| s.final_val_map),
                final_test_map: tests.and_then(|t| Stat::of(&t)),
                val_gain: stat(&|s| s.final_val_map - s.initial_val_map),
                inspections: stat(&|s| s.inspections as f64),
                corrections: stat(&|s| s.corrections as f64),
            }
        })
        .collect();

    let hashes: Vec<&str> = runs.iter().map(|r| r.summary.config_hash.as_str()).collect();
    Ok(Report {
        report_hash: hash_bytes(hashes.join(",").as_bytes()),
        runs,
        aggregates,
    })
}

/// Two-column `x y` files per curve: accuracy against curve row and against
/// the size of the well-labeled set.
fn write_plots(out: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for entry in report.runs.iter().filter(|r| r.flag.is_none()) {
        let hash = &entry.summary.config_hash;
        let src = curve_path(&entry.dir, hash);
        let file = fs::File::open(&src).map_err(|e| CliError::io(&src, e))?;
        let curve = LearningCurve::read_csv(file)?;
        let series: [(&str, Box<dyn Fn(usize) -> f64>); 2] = [
            ("step", Box::new(|i| i as f64)),
            ("well", Box::new(|i| curve.rows[i].d_well_size as f64)),
        ];
        for (name, x) in series {
            let path = out.join(format!("plot_{hash}_{name}.txt"));
            let mut w = create(&path)?;
            for (i, row) in curve.rows.iter().enumerate() {
                writeln!(w, "{} {}", x(i), row.acc_after).map_err(|e| CliError::io(&path, e))?;
            }
            finish(&path, w)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Serialize)]
struct RunCsvRow<'a> {
    dir: String,
    config_hash: &'a str,
    strategy: Strategy,
    seed: u64,
    u: f64,
    d: f64,
    c: f64,
    confidence_rule: &'a str,
    status: iassl_core::active_loop::RunStatus,
    initial_val_map: f64,
    final_val_map: f64,
    initial_test_map: Option<f64>,
    final_test_map: Option<f64>,
    inspections: u64,
    corrections: u64,
    d_well_start: usize,
    d_well_end: usize,
    flag: Option<&'a str>,
}

#[derive(Serialize)]
struct AggregateCsvRow<'a> {
    strategy: Strategy,
    u: f64,
    d: f64,
    c: f64,
    confidence_rule: &'a str,
    runs: usize,
    final_val_map_mean: f64,
    final_val_map_var: f64,
    final_test_map_mean: Option<f64>,
    final_test_map_var: Option<f64>,
    val_gain_mean: f64,
    val_gain_var: f64,
    inspections_mean: f64,
    inspections_var: f64,
    corrections_mean: f64,
    corrections_var: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for row in rows {
            csv.serialize(row)?;
        }
        csv.flush().map_err(|e| CliError::io(path, e))?;
    }
    finish(path, w)
}

pub fn cmd_report(runs_dir: &Path, out: &Path, format: ReportFormat) -> Result<(Report, Vec<PathBuf>)> {
    let report = build_report(runs_dir)?;
    ensure_dir(out)?;
    let mut written = Vec::new();
    let stem = format!("report_{}", report.report_hash);
    match format {
        ReportFormat::Json => written.push(write_json(&out.join(format!("{stem}.json")), &report)?),
        ReportFormat::Csv => {
            let runs = out.join(format!("{stem}_runs.csv"));
            write_csv(
                &runs,
                report.runs.iter().map(|r| {
                    let s = &r.summary;
                    RunCsvRow {
                        dir: r.dir.display().to_string(),
                        config_hash: &s.config_hash,
                        strategy: s.strategy,
                        seed: s.seed,
                        u: s.u,
                        d: s.d,
                        c: s.c,
                        confidence_rule: &s.confidence_rule,
                        status: s.status,
                        initial_val_map: s.initial_val_map,
                        final_val_map: s.final_val_map,
                        initial_test_map: s.initial_test_map,
                        final_test_map: s.final_test_map,
                        inspections: s.inspections,
                        corrections: s.corrections,
                        d_well_start: s.d_well_start,
                        d_well_end: s.d_well_end,
                        flag: r.flag.as_deref(),
                    }
                }),
            )?;
            let aggregates = out.join(format!("{stem}_aggregate.csv"));
            write_csv(
                &aggregates,
                report.aggregates.iter().map(|a| AggregateCsvRow {
                    strategy: a.strategy,
                    u: a.u,
                    d: a.d,
                    c: a.c,
                    confidence_rule: &a.confidence_rule,
                    runs: a.runs,
                    final_val_map_mean: a.final_val_map.mean,
                    final_val_map_var: a.final_val_map.variance,
                    final_test_map_mean: a.final_test_map.map(|s| s.mean),
                    final_test_map_var: a.final_test_map.map(|s| s.variance),
                    val_gain_mean: a.val_gain.mean,
                    val_gain_var: a.val_gain.variance,
                    inspections_mean: a.inspections.mean,
                    inspections_var: a.inspections.variance,
                    corrections_mean: a.corrections.mean,
                    corrections_var: a.corrections.variance,
                }),
            )?;
            written.push(runs);
            written.push(aggregates);
        }
    }
    written.extend(write_plots(out, &report)?);
    Ok((report, written))
}
