//! Supervised flow-matching pre-stage on noisy expert demonstrations.
//!
//! For a demo action `x0`, noise `x1 ~ N(0, I)` and `t ~ U[0, 1]`, the field is
//! regressed at `x_t = t x1 + (1 - t) x0` onto the straight-line velocity
//! `x1 - x0`, so that Euler integration from `t = 1` to `t = 0` lands on the
//! demo distribution.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{expert_demos, Demo, EnvConfig};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{Architecture, Trace, VelocityField};
use crate::rng::{keyed_rng, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Number of expert episodes in the few-shot demo set.
    pub demos: usize,
    /// Std of the Gaussian noise added to every expert action coordinate.
    pub demo_noise: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            demos: 16,
            demo_noise: 0.05,
            steps: 300,
            batch_size: 32,
            learning_rate: 3e-3,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 && self.steps > 0 {
            return Err(Error::config("sft.demos", "must be at least 1 when sft.steps > 0"));
        }
        if !(self.demo_noise >= 0.0) {
            return Err(Error::config("sft.demo_noise", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sft.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("sft.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Mean conditional flow-matching loss `|v(x_t, t) - (x1 - x0)|^2` over a
/// batch of `(demo, x1, t)` triples, with its parameter gradient.
pub fn cfm_loss_and_grad(
    field: &VelocityField,
    batch: &[(&Demo, Vec<f64>, f64)],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; field.num_params()];
    let mut trace = Trace::default();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (demo, x1, t) in batch {
        let x0 = &demo.action;
        let x_t: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let input = field.assemble_input(&x_t, *t, &demo.observation.context, &demo.observation.observation)?;
        field.forward_traced_into(&input, &mut trace);
        let residual: Vec<f64> = trace
            .output()
            .iter()
            .zip(x1.iter().zip(x0))
            .map(|(v, (a, b))| v - (a - b))
            .collect();
        loss += scale * residual.iter().map(|r| r * r).sum::<f64>();
        field.accumulate_vjp(&trace, &residual, 2.0 * scale, &mut grad);
    }
    Ok((loss, grad))
}

/// Trains a freshly initialized field on demos of `env`. Returns the field
/// and the final batch loss.
pub fn pretrain(
    arch: Architecture,
    env: &EnvConfig,
    config: &SftConfig,
    seed: u64,
) -> Result<(VelocityField, f64)> {
    config.validate()?;
    let mut field = VelocityField::init(arch, seed)?;
    if config.steps == 0 {
        return Ok((field, f64::NAN));
    }
    let demos = expert_demos(env, config.demos, config.demo_noise, seed)?;
    let mut opt = Optimizer::new(
        OptimizerConfig {
            learning_rate: config.learning_rate,
            ..OptimizerConfig::default()
        },
        field.num_params(),
    );
    let mut rng = keyed_rng(&[tag::SFT, seed]);
    let dim = field.architecture().state_dim;
    let mut last = f64::NAN;
    for _ in 0..config.steps {
        let batch: Vec<(&Demo, Vec<f64>, f64)> = (0..config.batch_size)
            .map(|_| {
                let demo = &demos[rng.random_range(0..demos.len())];
                let x1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let t: f64 = rng.random();
                (demo, x1, t)
            })
            .collect();
        let (loss, grad) = cfm_loss_and_grad(&field, &batch)?;
        opt.step(field.params_mut(), &grad)?;
        last = loss;
    }
    Ok((field, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Activation;

    fn arch() -> Architecture {
        Architecture::new(2, 2, 0, vec![16, 16], Activation::Tanh).unwrap()
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = SftConfig {
            steps: 20,
            ..Default::default()
        };
        let (a, la) = pretrain(arch(), &EnvConfig::default(), &cfg, 3).unwrap();
        let (b, lb) = pretrain(arch(), &EnvConfig::default(), &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let field = VelocityField::init(arch(), 1).unwrap();
        let demos = expert_demos(&EnvConfig::default(), 2, 0.1, 0).unwrap();
        let batch: Vec<(&Demo, Vec<f64>, f64)> = vec![(&demos[0], vec![0.3, -1.2], 0.4), (&demos[1], vec![1.0, 0.1], 0.9)];
        let (_, grad) = cfm_loss_and_grad(&field, &batch).unwrap();
        for k in [0, 7, 40, field.num_params() - 1] {
            let h = 1e-6;
            let mut up = field.clone();
            up.params_mut()[k] += h;
            let mut down = field.clone();
            down.params_mut()[k] -= h;
            let fd = (cfm_loss_and_grad(&up, &batch).unwrap().0 - cfm_loss_and_grad(&down, &batch).unwrap().0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let short = SftConfig {
            steps: 1,
            ..Default::default()
        };
        let long = SftConfig {
            steps: 400,
            ..Default::default()
        };
        let (_, first) = pretrain(arch(), &EnvConfig::default(), &short, 0).unwrap();
        let (_, last) = pretrain(arch(), &EnvConfig::default(), &long, 0).unwrap();
        assert!(last < first, "{last} !< {first}");
    }
}
