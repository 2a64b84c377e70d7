//! Parameter sweeps: every (triple, strategy, seed) cell of the grid runs
//! independently; rows come back in grid order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iassl_core::active_loop::RunStatus;

use super::run::execute;
use super::{create, ensure_dir, finish};
use crate::config::{hash_bytes, RunConfig, Strategy};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub u: f64,
    pub d: f64,
    pub c: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub initial_test_map: Option<f64>,
    pub final_test_map: Option<f64>,
    pub initial_val_map: f64,
    pub final_val_map: f64,
    pub inspections: u64,
    pub corrections: u64,
    pub d_well_start: usize,
    pub d_well_end: usize,
    pub status: RunStatus,
}

/// The run configs of every grid cell, triples outermost, seeds innermost.
pub fn grid_cells(config: &RunConfig) -> Result<Vec<RunConfig>> {
    let grid = &config.sweep;
    let seeds = if grid.seeds.is_empty() {
        vec![config.seed]
    } else {
        grid.seeds.clone()
    };
    if grid.triples.is_empty() || grid.strategies.is_empty() {
        return Err(CliError::config("at `sweep`: the grid needs at least one triple and one strategy"));
    }
    let mut cells = Vec::new();
    for &triple in &grid.triples {
        for &strategy in &grid.strategies {
            for &seed in &seeds {
                let cell = config
                    .clone()
                    .with_params(triple)
                    .with_strategy(strategy)
                    .with_seed(seed);
                cell.validate()?;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub fn sweep(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let cells = grid_cells(config)?;
    cells
        .par_iter()
        .map(|cell| {
            let run = execute(cell, None, |_, _| Ok(()))?;
            let s = run.summary;
            Ok(SweepRow {
                u: s.u,
                d: s.d,
                c: s.c,
                strategy: s.strategy,
                seed: s.seed,
                config_hash: s.config_hash,
                initial_test_map: s.initial_test_map,
                final_test_map: s.final_test_map,
                initial_val_map: s.initial_val_map,
                final_val_map: s.final_val_map,
                inspections: s.inspections,
                corrections: s.corrections,
                d_well_start: s.d_well_start,
                d_well_end: s.d_well_end,
                status: s.status,
            })
        })
        .collect()
}

/// Names the sweep by the base config and the grid together.
pub fn sweep_hash(config: &RunConfig) -> String {
    let grid = serde_json::to_string(&config.sweep).expect("grids serialize");
    hash_bytes(format!("{}:{grid}", config.hash()).as_bytes())
}

pub fn cmd_sweep(config: &RunConfig, out: &Path) -> Result<(PathBuf, Vec<SweepRow>)> {
    let rows = sweep(config)?;
    ensure_dir(out)?;
    let path = out.join(format!("sweep_{}.csv", sweep_hash(config)));
    let mut w = create(&path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for row in &rows {
            csv.serialize(row)?;
        }
        csv.flush().map_err(|e| CliError::io(&path, e))?;
    }
    finish(&path, w)?;
    Ok((path, rows))
}
