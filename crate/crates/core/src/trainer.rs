//! The training loop: collect with the EMA rollout policy, optimize the
//! configured objective, sync the rollout policy, evaluate.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{AlphaSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::objective::{errors_against, evaluate as evaluate_objective, mirror};
use crate::optim::Optimizer;
use crate::policy::{Trace, VelocityField};
use crate::rng::{keyed_rng, tag};
use crate::rollout::{assign_credit, collect, evaluate, ActingPolicy, CollectSpec, RolloutBuffer, TransitionRecord};
use crate::sft;

pub const METRICS_HEADER: &str = "iter,success_rate,loss_mean,e_plus_mean,e_minus_mean,delta_v_norm,grad_norm,alpha,seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub success_rate: f64,
    pub loss_mean: f64,
    pub e_plus_mean: f64,
    pub e_minus_mean: f64,
    pub delta_v_norm: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iter,
            self.success_rate,
            self.loss_mean,
            self.e_plus_mean,
            self.e_minus_mean,
            self.delta_v_norm,
            self.grad_norm,
            self.alpha,
            self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Running sums of per-record statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IterationStats {
    pub records: usize,
    pub loss_sum: f64,
    pub e_plus_sum: f64,
    pub e_minus_sum: f64,
    pub delta_v_norm_sum: f64,
    pub batches: usize,
    pub grad_norm_sum: f64,
}

impl IterationStats {
    pub fn merge(&mut self, other: &IterationStats) {
        self.records += other.records;
        self.loss_sum += other.loss_sum;
        self.e_plus_sum += other.e_plus_sum;
        self.e_minus_sum += other.e_minus_sum;
        self.delta_v_norm_sum += other.delta_v_norm_sum;
        self.batches += other.batches;
        self.grad_norm_sum += other.grad_norm_sum;
    }

    fn mean(sum: f64, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn loss_mean(&self) -> f64 {
        Self::mean(self.loss_sum, self.records)
    }
    pub fn e_plus_mean(&self) -> f64 {
        Self::mean(self.e_plus_sum, self.records)
    }
    pub fn e_minus_mean(&self) -> f64 {
        Self::mean(self.e_minus_sum, self.records)
    }
    pub fn delta_v_norm(&self) -> f64 {
        Self::mean(self.delta_v_norm_sum, self.records)
    }
    pub fn grad_norm(&self) -> f64 {
        Self::mean(self.grad_norm_sum, self.batches)
    }
}

/// Loss and parameter gradient (mean over the batch) for a set of records.
pub fn batch_loss_and_grad(
    field: &VelocityField,
    records: &[&TransitionRecord],
    config: &TrainConfig,
) -> Result<(Vec<f64>, IterationStats)> {
    let mut grad = vec![0.0; field.num_params()];
    let mut stats = IterationStats::default();
    let mut trace = Trace::default();
    let scale = 1.0 / records.len() as f64;
    for record in records {
        let input = field.assemble_input(&record.x_t, record.t, &record.context, &record.observation)?;
        field.forward_traced_into(&input, &mut trace);
        let branches = mirror(&record.v_old, trace.output(), config.beta)?;
        let errors = errors_against(&record.observed, &record.target, &branches)?;
        let value = evaluate_objective(config.objective, &errors, &branches.delta_v, record.reward, config.lambda_tr)?;
        field.accumulate_vjp(&trace, &value.grad_v, scale, &mut grad);
        stats.records += 1;
        stats.loss_sum += value.loss;
        stats.e_plus_sum += errors.e_plus;
        stats.e_minus_sum += errors.e_minus;
        stats.delta_v_norm_sum += branches.delta_v.iter().map(|d| d * d).sum::<f64>().sqrt();
    }
    Ok((grad, stats))
}

/// Optimization phase of one iteration: `update_epochs` passes over the
/// buffer in shuffled mini-batches, one optimizer step per batch.
pub fn optimize_iteration(
    field: &mut VelocityField,
    optimizer: &mut Optimizer,
    buffer: &RolloutBuffer,
    config: &TrainConfig,
    iteration: usize,
) -> Result<IterationStats> {
    if buffer.is_empty() {
        return Err(Error::Contract("optimize_iteration needs a nonempty buffer".into()));
    }
    let mut total = IterationStats::default();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut batch_idx = 0;
    for epoch in 0..config.update_epochs {
        let mut rng = keyed_rng(&[tag::SHUFFLE, config.seed, iteration as u64, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let records: Vec<&TransitionRecord> = chunk.iter().map(|&i| &buffer.records[i]).collect();
            let (grad, mut stats) = batch_loss_and_grad(field, &records, config)?;
            if !stats.loss_sum.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    batch: batch_idx,
                    dump: dump_batch(&records),
                });
            }
            let norm = optimizer.step(field.params_mut(), &grad)?;
            stats.batches = 1;
            stats.grad_norm_sum = norm;
            total.merge(&stats);
            batch_idx += 1;
        }
    }
    Ok(total)
}

fn dump_batch(records: &[&TransitionRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "[env {} step {} j {} t {} r {} x_t {:?} observed {:?} v_old {:?}]",
                r.env_idx, r.env_step, r.j, r.t, r.reward, r.x_t, r.observed, r.v_old
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `theta_old <- alpha * theta_old + (1 - alpha) * theta`, elementwise.
pub fn ema_update(theta_old: &mut [f64], theta: &[f64], alpha: f64) -> Result<()> {
    crate::error::check_len("parameters", theta.len(), theta_old.len())?;
    for (old, new) in theta_old.iter_mut().zip(theta) {
        let mixed = new + alpha * (*old - new);
        // Rounding can push the mix a hair outside [min, max]; clamp it back.
        *old = mixed.clamp(old.min(*new), old.max(*new));
    }
    Ok(())
}

/// Decay used at iteration `iteration` of `0..=total`.
pub fn alpha_schedule(iteration: usize, total: usize, config: &TrainConfig) -> f64 {
    match config.alpha_schedule {
        AlphaSchedule::Constant => config.alpha_start,
        AlphaSchedule::Linear if total == 0 => config.alpha_start,
        AlphaSchedule::Linear if iteration >= total => config.alpha_end,
        AlphaSchedule::Linear => {
            let frac = iteration.min(total) as f64 / total as f64;
            config.alpha_start + (config.alpha_end - config.alpha_start) * frac
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub policy: VelocityField,
    pub rollout_policy: VelocityField,
    pub init_success_rate: f64,
    pub final_success_rate: f64,
    pub metrics: Vec<MetricsRow>,
    /// Measured seconds since the start of training, one per metrics row.
    pub timings: Vec<f64>,
}

impl TrainingOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("iter,seconds\n");
        for (row, s) in self.metrics.iter().zip(&self.timings) {
            out.push_str(&format!("{},{:.3}\n", row.iter, s));
        }
        out
    }
}

/// The supervised init for `config`: the field after the SFT pre-stage.
pub fn sft_init(config: &TrainConfig) -> Result<VelocityField> {
    Ok(sft::pretrain(config.architecture()?, &config.env, &config.sft, config.seed)?.0)
}

pub fn evaluate_field(field: &VelocityField, config: &TrainConfig) -> Result<f64> {
    let schedule = config.schedule()?;
    Ok(evaluate(&ActingPolicy::Field(field, &schedule), &config.env, config.eval_episodes, config.eval_seed)?.success_rate)
}

/// Runs the full loop from the SFT init (computed here unless `init` is given).
pub fn run_training(config: &TrainConfig, init: Option<&VelocityField>) -> Result<TrainingOutcome> {
    config.validate()?;
    let start = Instant::now();
    let init = match init {
        Some(f) => {
            if f.architecture() != &config.architecture()? {
                return Err(Error::Contract("init field does not match the configured architecture".into()));
            }
            f.clone()
        }
        None => sft_init(config)?,
    };
    let schedule = config.schedule()?;
    let init_success_rate = evaluate_field(&init, config)?;
    let mut theta = init.clone();
    let mut theta_old = init;
    let mut optimizer = Optimizer::new(config.optimizer, theta.num_params());
    let mut metrics = Vec::new();
    let mut timings = Vec::new();
    let mut window = IterationStats::default();
    let mut final_success_rate = init_success_rate;
    let total = config.iterations.saturating_sub(1);
    let spec = CollectSpec {
        env: &config.env,
        envs: config.envs,
        schedule: &schedule,
        selector: config.step_select,
        mode: config.sampler,
        target: config.target,
        record_all_steps: config.record_all_steps,
    };

    for m in 0..config.iterations {
        let mut buffer = RolloutBuffer::default();
        for epoch in 0..config.rollout_epochs {
            let part = collect(&theta_old, &spec, &[config.seed, m as u64, epoch as u64])
                .map_err(|e| iteration_context(e, m))?;
            buffer.extend(part);
        }
        assign_credit(&mut buffer, config.credit);
        let stats = optimize_iteration(&mut theta, &mut optimizer, &buffer, config, m)?;
        window.merge(&stats);
        let alpha = alpha_schedule(m, total, config);
        ema_update(theta_old.params_mut(), theta.params(), alpha)?;

        let last = m + 1 == config.iterations;
        if (m + 1) % config.eval_every == 0 || last {
            let success_rate = evaluate_field(&theta, config)?;
            final_success_rate = success_rate;
            let elapsed = start.elapsed().as_secs_f64();
            metrics.push(MetricsRow {
                iter: m + 1,
                success_rate,
                loss_mean: window.loss_mean(),
                e_plus_mean: window.e_plus_mean(),
                e_minus_mean: window.e_minus_mean(),
                delta_v_norm: window.delta_v_norm(),
                grad_norm: window.grad_norm(),
                alpha,
                seconds: if config.wall_clock_metrics { elapsed } else { 0.0 },
            });
            timings.push(elapsed);
            window = IterationStats::default();
        }
    }
    Ok(TrainingOutcome {
        policy: theta,
        rollout_policy: theta_old,
        init_success_rate,
        final_success_rate,
        metrics,
        timings,
    })
}

fn iteration_context(e: Error, m: usize) -> Error {
    match e {
        Error::Contract(msg) => Error::Contract(format!("iteration {m}: {msg}")),
        Error::Domain(msg) => Error::Domain(format!("iteration {m}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{OptimizerConfig, OptimizerKind};
    use crate::rollout::{StepSelector, TargetKind};
    use crate::solver::SamplerMode;

    fn small_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            envs: 8,
            rollout_epochs: 1,
            batch_size: 8,
            eval_episodes: 16,
            eval_every: 2,
            net: crate::config::NetConfig {
                hidden: vec![8],
                ..Default::default()
            },
            sft: crate::sft::SftConfig {
                steps: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn buffer_for(field: &VelocityField, config: &TrainConfig) -> RolloutBuffer {
        let schedule = config.schedule().unwrap();
        let spec = CollectSpec {
            env: &config.env,
            envs: config.envs,
            schedule: &schedule,
            selector: StepSelector::Uniform,
            mode: SamplerMode::Sde,
            target: TargetKind::StepWise,
            record_all_steps: false,
        };
        collect(field, &spec, &[0]).unwrap()
    }

    #[test]
    fn alpha_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(alpha_schedule(0, 400, &c), 0.1);
        assert_eq!(alpha_schedule(400, 400, &c), 0.995);
        assert!((alpha_schedule(200, 400, &c) - 0.5475).abs() < 1e-15);
        let mut prev = 0.0;
        for m in 0..=400 {
            let a = alpha_schedule(m, 400, &c);
            assert!(a >= prev);
            prev = a;
        }
        let constant = TrainConfig {
            alpha_schedule: AlphaSchedule::Constant,
            ..c
        };
        assert_eq!(alpha_schedule(300, 400, &constant), 0.1);
    }

    #[test]
    fn ema_examples() {
        let mut old = vec![0.0; 3];
        ema_update(&mut old, &[1.0; 3], 0.1).unwrap();
        assert_eq!(old, vec![0.9; 3]);
        let mut old = vec![0.3, -2.0];
        ema_update(&mut old, &[1.0, 5.0], 0.0).unwrap();
        assert_eq!(old, vec![1.0, 5.0]);
        let mut old = vec![0.3, -2.0];
        ema_update(&mut old, &[1.0, 5.0], 1.0 - 1e-16).unwrap();
        assert!((old[0] - 0.3).abs() < 1e-15 && (old[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_label_leaves_parameters() {
        let config = small_config();
        let field = sft_init(&config).unwrap();
        let mut buffer = buffer_for(&field, &config);
        for r in &mut buffer.records {
            r.reward = 0.5;
        }
        let mut theta = VelocityField::init(config.architecture().unwrap(), 11).unwrap();
        let before = theta.clone();
        let mut opt = Optimizer::new(config.optimizer, theta.num_params());
        let stats = optimize_iteration(&mut theta, &mut opt, &buffer, &config, 0).unwrap();
        assert_eq!(theta, before);
        assert_eq!(stats.loss_mean(), 2f64.ln());
    }

    #[test]
    fn synced_policy_starts_at_ln2() {
        let config = small_config();
        let field = sft_init(&config).unwrap();
        let buffer = buffer_for(&field, &config);
        let records: Vec<&TransitionRecord> = buffer.records.iter().collect();
        let (_, stats) = batch_loss_and_grad(&field, &records, &config).unwrap();
        assert!((stats.loss_mean() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(stats.e_plus_sum, stats.e_minus_sum);
    }

    #[test]
    fn single_record_update_follows_closed_form() {
        let mut config = small_config();
        config.optimizer = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let rollout = sft_init(&config).unwrap();
        let mut buffer = buffer_for(&rollout, &config);
        buffer.records.truncate(1);
        buffer.records[0].reward = 1.0;
        // Move theta away from theta_old so that z != 0.
        let mut theta = rollout.clone();
        for (i, p) in theta.params_mut().iter_mut().enumerate() {
            *p += 1e-2 * ((i as f64) * 0.7).sin();
        }
        let before = theta.clone();
        let mut opt = Optimizer::new(config.optimizer, theta.num_params());
        config.update_epochs = 1;
        optimize_iteration(&mut theta, &mut opt, &buffer, &config, 0).unwrap();
        let step: Vec<f64> = theta.params().iter().zip(before.params()).map(|(a, b)| a - b).collect();

        let r = &buffer.records[0];
        let v = before.forward(&r.x_t, r.t, &r.context, &r.observation).unwrap();
        let branches = mirror(&r.v_old, &v, config.beta).unwrap();
        let err = errors_against(&r.observed, &r.target, &branches).unwrap();
        let y = 2.0 * r.reward - 1.0;
        let z = 0.5 * y * (err.e_plus - err.e_minus);
        let w = crate::objective::sigmoid(z) * y * err.gain / err.variance;
        let dir: Vec<f64> = err.residual.iter().map(|e| w * e).collect();
        let tape = before
            .backward(&r.x_t, r.t, &r.context, &r.observation, &|out: &[f64]| {
                (out.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>(), dir.clone())
            })
            .unwrap();
        let dot: f64 = step.iter().zip(&tape.grad).map(|(a, b)| a * b).sum();
        let na = step.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = tape.grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 1.0 - 1e-8, "cosine {}", dot / (na * nb));
    }

    #[test]
    fn zero_iterations_returns_init() {
        let mut config = small_config();
        config.iterations = 0;
        let out = run_training(&config, None).unwrap();
        assert_eq!(out.policy, sft_init(&config).unwrap());
        assert!(out.metrics.is_empty());
        assert_eq!(out.metrics_csv(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn training_is_deterministic() {
        let config = small_config();
        let a = run_training(&config, None).unwrap();
        let b = run_training(&config, None).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.metrics[1].iter, 3);
        for row in &a.metrics {
            assert!((0.0..=1.0).contains(&row.success_rate));
            assert_eq!(row.seconds, 0.0);
        }
    }
}
