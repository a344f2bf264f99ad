//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients with a larger global norm are rescaled to this norm; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(format!("{prefix}.beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!("{prefix}.beta2"), "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("{prefix}.epsilon"), "must be positive"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::config(format!("{prefix}.max_grad_norm"), "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let moments = if config.kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            config,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends along `grad`. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        check_len("gradient", grad.len(), params.len())?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            self.config.max_grad_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * clip * g;
                }
            }
            OptimizerKind::Adam => {
                check_len("adam state", self.m.len(), params.len())?;
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let g = clip * grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + self.config.epsilon);
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.5,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = [1.0, -1.0];
        let norm = opt.step(&mut p, &[2.0, 0.0]).unwrap();
        assert_eq!(p, [0.0, -1.0]);
        assert_eq!(norm, 2.0);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 3);
        let mut p = [0.0; 3];
        opt.step(&mut p, &[5.0, -0.01, 0.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(OptimizerConfig { kind, ..Default::default() }, 2);
            let mut p = [0.3, -0.7];
            opt.step(&mut p, &[0.0, 0.0]).unwrap();
            assert_eq!(p, [0.3, -0.7]);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn clipping_rescales() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            max_grad_norm: 1.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.0, 4.0]).unwrap();
        assert!((p[0] + 0.6).abs() < 1e-15 && (p[1] + 0.8).abs() < 1e-15);
    }
}
