//! First-order optimizers and the block coordinate descent driver.
//!
//! Optimizers are trait objects looked up by name in an [`OptimizerRegistry`],
//! so run configs select them with a plain string (`"sgd"`, `"adam"`).

mod adam;
mod bcd;
mod sgd;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, Adam, AdamState};
pub use bcd::{bcd_minimize, BcdConfig, BcdOutcome, BlockProblem};
pub use sgd::{sgd_step, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Mini-batch size; `None` means full batch.
    pub batch_size: Option<usize>,
    /// Weight of the squared box loss relative to cross-entropy.
    pub loc_weight: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: "adam".into(),
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            batch_size: Some(8),
            loc_weight: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: "sgd".into(),
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: "adam".into(),
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("optimizer.lr = {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("optimizer.{name} = {b} is outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer.eps must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("optimizer.batch_size must be at least 1"));
        }
        if !(self.loc_weight >= 0.0) {
            return Err(Error::invalid("optimizer.loc_weight must be non-negative"));
        }
        OptimizerRegistry::default().check(&self.kind)
    }
}

/// A stateful first-order update rule over a flat parameter vector.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()>;
}

pub type OptimizerFactory = fn(&OptimizerConfig, usize) -> Box<dyn Optimizer>;

pub struct OptimizerRegistry {
    factories: BTreeMap<&'static str, OptimizerFactory>,
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        let mut registry = OptimizerRegistry {
            factories: BTreeMap::new(),
        };
        registry.register("sgd", |cfg, _| Box::new(Sgd::new(cfg.lr)));
        registry.register("adam", |cfg, dim| Box::new(Adam::new(cfg, dim)));
        registry
    }
}

impl OptimizerRegistry {
    pub fn register(&mut self, name: &'static str, factory: OptimizerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.factories.contains_key(name) {
            Ok(())
        } else {
            Err(Error::UnknownStrategy {
                kind: "optimizer",
                name: name.to_string(),
            })
        }
    }

    pub fn build(&self, config: &OptimizerConfig, dim: usize) -> Result<Box<dyn Optimizer>> {
        self.check(&config.kind)?;
        Ok((self.factories[config.kind.as_str()])(config, dim))
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}
