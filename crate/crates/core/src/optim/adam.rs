use serde::{Deserialize, Serialize};

use super::{check_dims, Optimizer, OptimizerConfig};
use crate::error::Result;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamHyper) -> Result<()> {
        check_dims(params.len(), grad.len())?;
        check_dims(params.len(), self.m.len())?;
        check_dims(params.len(), self.v.len())?;
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl From<&OptimizerConfig> for AdamHyper {
    fn from(c: &OptimizerConfig) -> Self {
        AdamHyper {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update. Returns the advanced state and new params.
pub fn adam_step(
    state: &AdamState,
    params: &[f64],
    grad: &[f64],
    config: &OptimizerConfig,
) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.update(&mut out, grad, &config.into())?;
    Ok((next, out))
}

#[derive(Debug, Clone)]
pub struct Adam {
    state: AdamState,
    hyper: AdamHyper,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, dim: usize) -> Self {
        Adam {
            state: AdamState::new(dim),
            hyper: config.into(),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.state.update(params, grad, &self.hyper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = OptimizerConfig::adam(0.001);
        let (state, p) = adam_step(&AdamState::new(2), &[0.3, -0.7], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let cfg = OptimizerConfig::adam(0.001);
        // m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        let (_, p) = adam_step(&AdamState::new(1), &[0.0], &[1.0], &cfg).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0] + 0.000999999990).abs() < 1e-14);

        let (_, p) = adam_step(&AdamState::new(1), &[0.0], &[-2.0], &cfg).unwrap();
        let expected = 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0] - 0.000999999995).abs() < 1e-14);
    }

    #[test]
    fn functional_and_stateful_forms_agree() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut opt = Adam::new(&cfg, 2);
        let mut p = vec![1.0, 2.0];
        let mut state = AdamState::new(2);
        let mut q = p.clone();
        for k in 0..5 {
            let g = [0.1 * k as f64 - 0.2, 0.3];
            opt.step(&mut p, &g).unwrap();
            let (s, nq) = adam_step(&state, &q, &g, &cfg).unwrap();
            state = s;
            q = nq;
        }
        assert_eq!(p, q);
        assert_eq!(opt.state(), &state);
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = OptimizerConfig::adam(0.001);
        assert!(adam_step(&AdamState::new(2), &[0.0, 0.0], &[1.0], &cfg).is_err());
        assert!(adam_step(&AdamState::new(3), &[0.0, 0.0], &[1.0, 1.0], &cfg).is_err());
    }
}
