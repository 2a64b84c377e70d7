use super::{check_dims, Optimizer};
use crate::error::Result;

/// Plain gradient step: `params - lr * grad`.
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    check_dims(params.len(), grad.len())?;
    Ok(params.iter().zip(grad).map(|(p, g)| p - lr * g).collect())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dims(params.len(), grad.len())?;
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}
