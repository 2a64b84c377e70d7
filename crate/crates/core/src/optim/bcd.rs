//! Block coordinate descent over an ordered list of parameter blocks.
//!
//! Block 0 is the super-class level and carries the `lambda1` ridge weight;
//! every deeper block carries `lambda2`. Blocks are visited in order once per
//! cycle, each minimized with the others held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcdConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Stop once a cycle's decrease is at most `tol * |previous objective|`.
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for BcdConfig {
    fn default() -> Self {
        BcdConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            tol: 1e-6,
            max_cycles: 100,
        }
    }
}

impl BcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("bcd.tol must be positive"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("bcd regularization weights must be non-negative"));
        }
        if self.max_cycles == 0 {
            return Err(Error::invalid("bcd.max_cycles must be at least 1"));
        }
        Ok(())
    }

    pub fn ridge_weight(&self, block: usize) -> f64 {
        if block == 0 {
            self.lambda1
        } else {
            self.lambda2
        }
    }
}

/// A joint objective split into parameter blocks.
pub trait BlockProblem {
    /// Unregularized joint objective.
    fn objective(&self, blocks: &[Vec<f64>]) -> f64;

    /// Returns the minimizer of `objective + ridge * ||block||^2` over block
    /// `index`, holding the other blocks fixed.
    fn minimize_block(&self, index: usize, blocks: &[Vec<f64>], ridge: f64) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdOutcome {
    pub blocks: Vec<Vec<f64>>,
    /// Regularized objective before the first cycle and after every cycle.
    pub trace: Vec<f64>,
    pub cycles: usize,
}

fn regularized<P: BlockProblem + ?Sized>(problem: &P, blocks: &[Vec<f64>], config: &BcdConfig) -> f64 {
    let ridge: f64 = blocks
        .iter()
        .enumerate()
        .map(|(k, b)| config.ridge_weight(k) * b.iter().map(|v| v * v).sum::<f64>())
        .sum();
    problem.objective(blocks) + ridge
}

pub fn bcd_minimize<P: BlockProblem + ?Sized>(
    problem: &P,
    init: Vec<Vec<f64>>,
    config: &BcdConfig,
) -> Result<BcdOutcome> {
    config.validate()?;
    if init.is_empty() {
        return Err(Error::Empty("bcd blocks"));
    }
    let mut blocks = init;
    let mut current = regularized(problem, &blocks, config);
    let mut trace = vec![current];
    let mut cycles = 0;

    while cycles < config.max_cycles {
        cycles += 1;
        let start = current;
        for k in 0..blocks.len() {
            let proposal = problem.minimize_block(k, &blocks, config.ridge_weight(k));
            if proposal.len() != blocks[k].len() {
                return Err(Error::DimensionMismatch {
                    expected: blocks[k].len(),
                    got: proposal.len(),
                });
            }
            let previous = std::mem::replace(&mut blocks[k], proposal);
            let after = regularized(problem, &blocks, config);
            if after > current + 1e-12 * current.abs().max(1.0) || after.is_nan() {
                blocks[k] = previous;
                return Err(Error::ObjectiveIncreased {
                    cycle: cycles,
                    block: k,
                    before: current,
                    after,
                });
            }
            current = after;
        }
        trace.push(current);
        if start - current <= config.tol * start.abs() {
            break;
        }
    }

    Ok(BcdOutcome {
        blocks,
        trace,
        cycles,
    })
}
