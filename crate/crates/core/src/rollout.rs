//! Data collection with the rollout policy.
//!
//! Each env step runs a full sampler chain, executes its terminal state and
//! keeps one solver transition (or all of them when `record_all_steps` is on).
//! The episode's terminal reward is copied onto every record it produced.
//!
//! Randomness is keyed per episode: `episode = derive_seed(base_key ++ [env_idx])`.
//! The env resets with `episode`; the chain for env step `i` draws `x1` and then
//! the per-step noises from `(CHAIN_NOISE, episode, i)`; the solver index comes
//! from `(STEP_SELECT, episode, i)`.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::objective::AffineTransition;
use crate::policy::VelocityField;
use crate::rng::{derive_seed, keyed_rng, tag, NoiseSource, NoiseStream};
use crate::solver::{affine_coefficients, run_chain, SamplerChain, SamplerMode, SolverSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSelector {
    Uniform,
    Fixed(usize),
}

impl fmt::Display for StepSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSelector::Uniform => f.write_str("uniform"),
            StepSelector::Fixed(j) => write!(f, "fixed:{j}"),
        }
    }
}

impl FromStr for StepSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(StepSelector::Uniform);
        }
        s.strip_prefix("fixed:")
            .and_then(|j| j.parse().ok())
            .map(StepSelector::Fixed)
            .ok_or_else(|| Error::config("step_select", format!("expected `uniform` or `fixed:<j>`, got `{s}`")))
    }
}

impl Serialize for StepSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StepSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn select_step(selector: StepSelector, k: usize, rng: &mut impl Rng) -> Result<usize> {
    match selector {
        StepSelector::Fixed(j) if j < k => Ok(j),
        StepSelector::Fixed(j) => Err(Error::config(
            "step_select",
            format!("fixed index {j} out of range for {k} solver steps"),
        )),
        StepSelector::Uniform if k == 0 => Err(Error::config("k", "need at least one solver step")),
        StepSelector::Uniform => Ok(rng.random_range(0..k)),
    }
}

/// What a recorded transition is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// The next solver state `x_{t-}` under the one-step Gaussian.
    StepWise,
    /// The terminal sample `x_{t_K}`, with the one-step mean propagated
    /// through the rest of the recorded chain and the injected variance
    /// accumulated along it.
    Terminal,
    /// The terminal sample against the straight-line endpoint prediction
    /// `x_t - t v` with unit covariance (no noise correction).
    TerminalEndpoint,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::StepWise => "step_wise",
            TargetKind::Terminal => "terminal",
            TargetKind::TerminalEndpoint => "terminal_endpoint",
        })
    }
}

/// Builds the affine-Gaussian target of transition `j` of `chain`.
///
/// For `Terminal` the later velocities are held at their recorded values, so
/// `x_K = P (U_j x_t + B_j v) + sum_{l>j} (prod_{j<m... } U) B_l v_l + noise` with
/// `P = prod_{l>j} U_l`. The noise variance is
/// `P^2 sigma_j^2 delta_j + sum_{k>j} sigma_k^2 delta_k prod_{m>k} U_m^2`.
/// This accumulation is our own derivation. Whenever the variance is zero
/// (deterministic steps) the target falls back to unit covariance.
pub fn transition_target(
    chain: &SamplerChain,
    schedule: &SolverSchedule,
    j: usize,
    kind: TargetKind,
) -> Result<(AffineTransition, Vec<f64>)> {
    let x_t = &chain.states[j];
    let coeffs = |l: usize| -> Result<(f64, f64, f64)> {
        let sigma = match chain.mode {
            SamplerMode::Ode => 0.0,
            SamplerMode::Sde => schedule.sigma(l),
        };
        let (u, b) = affine_coefficients(schedule.time(l), schedule.delta(l), sigma)?;
        Ok((u, b, sigma * sigma * schedule.delta(l)))
    };
    let (mut target, observed) = match kind {
        TargetKind::StepWise => {
            let (u, b, var) = coeffs(j)?;
            (AffineTransition::from_coefficients(x_t, u, b, var), chain.states[j + 1].clone())
        }
        TargetKind::Terminal => {
            let (u, b, var) = coeffs(j)?;
            let mut t = AffineTransition::from_coefficients(x_t, u, b, var);
            for l in j + 1..schedule.steps() {
                let (ul, bl, vl) = coeffs(l)?;
                for (base, v) in t.base.iter_mut().zip(&chain.velocities[l]) {
                    *base = ul * *base + bl * v;
                }
                t.gain *= ul;
                t.variance = ul * ul * t.variance + vl;
            }
            (t, chain.terminal().to_vec())
        }
        TargetKind::TerminalEndpoint => {
            let t = schedule.time(j);
            (
                AffineTransition {
                    base: x_t.clone(),
                    gain: -t,
                    variance: 1.0,
                },
                chain.terminal().to_vec(),
            )
        }
    };
    if target.variance == 0.0 {
        target = target.with_unit_covariance();
    }
    Ok((target, observed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub x_t: Vec<f64>,
    pub x_next: Vec<f64>,
    pub v_old: Vec<f64>,
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub observation: Vec<f64>,
    pub context: Vec<f64>,
    pub reward: f64,
    pub env_idx: usize,
    pub env_step: usize,
    pub j: usize,
    pub seed: u64,
    /// Transition the objective compares against, and the state it explains.
    pub target: AffineTransition,
    pub observed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub env_idx: usize,
    pub length: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub records: Vec<TransitionRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.reward).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn extend(&mut self, other: RolloutBuffer) {
        self.records.extend(other.records);
        self.episodes.extend(other.episodes);
    }
}

#[derive(Debug, Clone)]
pub struct CollectSpec<'a> {
    pub env: &'a EnvConfig,
    pub envs: usize,
    pub schedule: &'a SolverSchedule,
    pub selector: StepSelector,
    pub mode: SamplerMode,
    pub target: TargetKind,
    pub record_all_steps: bool,
}

/// Runs `spec.envs` episodes of the rollout field and records transitions.
/// `key` identifies the batch (for example `[run seed, iteration, epoch]`).
pub fn collect(rollout_field: &VelocityField, spec: &CollectSpec<'_>, key: &[u64]) -> Result<RolloutBuffer> {
    let mut env = spec.env.build()?;
    let arch = rollout_field.architecture();
    if arch.state_dim != env.action_dim()
        || arch.context_dim != env.context_dim()
        || arch.observation_dim != env.observation_dim()
    {
        return Err(Error::Contract(format!(
            "policy dims (state {}, context {}, observation {}) do not match env (action {}, context {}, observation {})",
            arch.state_dim,
            arch.context_dim,
            arch.observation_dim,
            env.action_dim(),
            env.context_dim(),
            env.observation_dim()
        )));
    }
    let k = spec.schedule.steps();
    if let StepSelector::Fixed(j) = spec.selector {
        if j >= k {
            return Err(Error::config("step_select", format!("fixed index {j} out of range for {k} solver steps")));
        }
    }
    let mut buffer = RolloutBuffer::default();
    let mut episode_key = key.to_vec();
    episode_key.push(0);
    for env_idx in 0..spec.envs {
        *episode_key.last_mut().unwrap() = env_idx as u64;
        let episode = derive_seed(&episode_key);
        let first = buffer.records.len();
        let mut obs = env.reset(episode);
        let mut env_step = 0;
        let reward = loop {
            let mut noise = NoiseStream::keyed(&[tag::CHAIN_NOISE, episode, env_step as u64]);
            let mut x1 = vec![0.0; arch.state_dim];
            noise.fill_standard_normal(&mut x1);
            let chain = run_chain(rollout_field, spec.schedule, &x1, &obs.context, &obs.observation, &mut noise, spec.mode)
                .map_err(|e| with_provenance(e, env_idx, env_step))?;
            let steps: Vec<usize> = if spec.record_all_steps {
                (0..k).collect()
            } else {
                let mut rng = keyed_rng(&[tag::STEP_SELECT, episode, env_step as u64]);
                vec![select_step(spec.selector, k, &mut rng)?]
            };
            for j in steps {
                let (target, observed) = transition_target(&chain, spec.schedule, j, spec.target)?;
                buffer.records.push(TransitionRecord {
                    x_t: chain.states[j].clone(),
                    x_next: chain.states[j + 1].clone(),
                    v_old: chain.velocities[j].clone(),
                    t: spec.schedule.time(j),
                    delta: spec.schedule.delta(j),
                    sigma: match spec.mode {
                        SamplerMode::Ode => 0.0,
                        SamplerMode::Sde => spec.schedule.sigma(j),
                    },
                    observation: obs.observation.clone(),
                    context: obs.context.clone(),
                    reward: 0.0,
                    env_idx,
                    env_step,
                    j,
                    seed: episode,
                    target,
                    observed,
                });
            }
            let outcome = env.step(chain.terminal()).map_err(|e| with_provenance(e, env_idx, env_step))?;
            env_step += 1;
            obs = outcome.observation;
            if outcome.done {
                break outcome.reward;
            }
        };
        for record in &mut buffer.records[first..] {
            record.reward = reward;
        }
        buffer.episodes.push(EpisodeSummary {
            env_idx,
            length: env_step,
            reward,
        });
    }
    Ok(buffer)
}

fn with_provenance(e: Error, env_idx: usize, env_step: usize) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("env {env_idx}, step {env_step}: {m}")),
        Error::Domain(m) => Error::Domain(format!("env {env_idx}, step {env_step}: {m}")),
        other => other,
    }
}

/// How per-record rewards are turned into the label `r` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditKind {
    /// The terminal outcome itself.
    Binary,
    /// Advantage-style soft weight: episode rewards are standardized over the
    /// batch and squashed with a sigmoid. A batch with no reward spread gets
    /// `r = 0.5` everywhere.
    Advantage,
}

pub fn assign_credit(buffer: &mut RolloutBuffer, kind: CreditKind) {
    if kind == CreditKind::Binary || buffer.episodes.is_empty() {
        return;
    }
    let n = buffer.episodes.len() as f64;
    let mean = buffer.episodes.iter().map(|e| e.reward).sum::<f64>() / n;
    let var = buffer.episodes.iter().map(|e| (e.reward - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for record in &mut buffer.records {
        let a = if std > 0.0 { (record.reward - mean) / std } else { 0.0 };
        record.reward = crate::objective::sigmoid(a);
    }
}

/// Something that turns an observation into an env action.
pub enum ActingPolicy<'a> {
    /// Greedy ODE sampling from `x1 ~ N(0, I)`.
    Field(&'a VelocityField, &'a SolverSchedule),
    Expert,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Runs `episodes` episodes with reset seeds `(EVAL, seed, e)`; the field
/// policy's `x1` and the random policy's actions are drawn from
/// `(EVAL, seed, e, env step)`.
pub fn evaluate(policy: &ActingPolicy<'_>, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be at least 1"));
    }
    let mut env: Env = env.build()?;
    let mut successes = 0;
    for e in 0..episodes as u64 {
        let mut obs = env.reset(derive_seed(&[tag::EVAL, seed, e]));
        let mut step = 0u64;
        loop {
            let key = [tag::EVAL, seed, e, step];
            let action = match policy {
                ActingPolicy::Field(field, schedule) => {
                    let mut noise = NoiseStream::keyed(&key);
                    let mut x1 = vec![0.0; field.architecture().state_dim];
                    noise.fill_standard_normal(&mut x1);
                    run_chain(*field, schedule, &x1, &obs.context, &obs.observation, &mut noise, SamplerMode::Ode)?
                        .terminal()
                        .to_vec()
                }
                ActingPolicy::Expert => env.expert_action(),
                ActingPolicy::Random => env.random_action(&mut keyed_rng(&key)),
            };
            let out = env.step(&action)?;
            obs = out.observation;
            step += 1;
            if out.done {
                if out.reward >= 1.0 {
                    successes += 1;
                }
                break;
            }
        }
    }
    Ok(EvalSummary {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
    })
}

const DUMP_MAGIC: &[u8; 8] = b"SNFTBUF1";

/// Writes `<stem>.csv` with columns `env_idx,env_step,j,t,r` and `<stem>.bin`.
///
/// The sidecar is little-endian: the magic `SNFTBUF1`, then `u64` record
/// count and `u32` state, context and observation dims, then per record the
/// f64 vectors `x_t, x_next, v_old, observed, context, observation` followed by
/// the f64 scalars `delta, sigma, target gain, target variance` and the
/// target base vector.
pub fn write_dump(buffer: &RolloutBuffer, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    let mut csv = String::from("env_idx,env_step,j,t,r\n");
    for r in &buffer.records {
        csv.push_str(&format!("{},{},{},{:?},{:?}\n", r.env_idx, r.env_step, r.j, r.t, r.reward));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let bin_path = stem.with_extension("bin");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(DUMP_MAGIC);
    bytes.extend_from_slice(&(buffer.records.len() as u64).to_le_bytes());
    let first = buffer.records.first();
    for dim in [
        first.map_or(0, |r| r.x_t.len()),
        first.map_or(0, |r| r.context.len()),
        first.map_or(0, |r| r.observation.len()),
    ] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for r in &buffer.records {
        for v in [&r.x_t, &r.x_next, &r.v_old, &r.observed, &r.context, &r.observation] {
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        for x in [r.delta, r.sigma, r.target.gain, r.target.variance].iter().chain(&r.target.base) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Reads the vectors back from a sidecar: `(x_t, x_next, v_old)` per record.
pub fn read_dump_vectors(bytes: &[u8]) -> Result<Vec<[Vec<f64>; 3]>> {
    let bad = |m: &str| Error::Format {
        what: "buffer dump",
        message: m.to_string(),
    };
    if bytes.len() < 24 || &bytes[..8] != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = |i: usize| u32::from_le_bytes(bytes[16 + 4 * i..20 + 4 * i].try_into().unwrap()) as usize;
    let (s, c, o) = (dim(0), dim(1), dim(2));
    let per = 4 * s + c + o + 4 + s;
    if bytes.len() != 28 + 8 * n * per {
        return Err(bad("length does not match header"));
    }
    let read = |idx: usize| f64::from_le_bytes(bytes[28 + 8 * idx..36 + 8 * idx].try_into().unwrap());
    Ok((0..n)
        .map(|r| {
            let base = r * per;
            let vec_at = |k: usize| (0..s).map(|i| read(base + k * s + i)).collect::<Vec<_>>();
            [vec_at(0), vec_at(1), vec_at(2)]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Activation, Architecture};

    fn bandit_field() -> VelocityField {
        VelocityField::init(Architecture::new(2, 2, 0, vec![16], Activation::Tanh).unwrap(), 0).unwrap()
    }

    fn spec<'a>(env: &'a EnvConfig, schedule: &'a SolverSchedule, selector: StepSelector) -> CollectSpec<'a> {
        CollectSpec {
            env,
            envs: 32,
            schedule,
            selector,
            mode: SamplerMode::Sde,
            target: TargetKind::StepWise,
            record_all_steps: false,
        }
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("uniform".parse::<StepSelector>().unwrap(), StepSelector::Uniform);
        assert_eq!("fixed:2".parse::<StepSelector>().unwrap(), StepSelector::Fixed(2));
        assert!("fixed:x".parse::<StepSelector>().is_err());
        assert_eq!(StepSelector::Fixed(3).to_string(), "fixed:3");
    }

    #[test]
    fn select_step_contracts() {
        let mut rng = keyed_rng(&[1]);
        for _ in 0..50 {
            assert_eq!(select_step(StepSelector::Fixed(0), 4, &mut rng).unwrap(), 0);
            assert_eq!(select_step(StepSelector::Uniform, 1, &mut rng).unwrap(), 0);
        }
        assert!(matches!(select_step(StepSelector::Fixed(4), 4, &mut rng), Err(Error::Config { .. })));
    }

    #[test]
    fn bandit_buffer_counts_and_consistency() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let field = bandit_field();
        let buf = collect(&field, &spec(&env, &schedule, StepSelector::Uniform), &[0, 0]).unwrap();
        assert_eq!(buf.len(), 32);
        assert_eq!(buf.episodes.len(), 32);
        for r in &buf.records {
            assert!(r.j < 4);
            let v = field.forward(&r.x_t, r.t, &r.context, &r.observation).unwrap();
            assert_eq!(v, r.v_old);
            assert_eq!(r.reward, buf.episodes[r.env_idx].reward);
        }
    }

    #[test]
    fn fixed_selector_records_its_time() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let buf = collect(&bandit_field(), &spec(&env, &schedule, StepSelector::Fixed(2)), &[0]).unwrap();
        assert!(buf.records.iter().all(|r| r.j == 2 && r.t == schedule.time(2)));
        assert!(collect(&bandit_field(), &spec(&env, &schedule, StepSelector::Fixed(4)), &[0]).is_err());
    }

    #[test]
    fn reach_rewards_are_broadcast() {
        let env = EnvConfig::reach_default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let field = VelocityField::init(Architecture::new(10, 0, 4, vec![16], Activation::Tanh).unwrap(), 0).unwrap();
        let mut s = spec(&env, &schedule, StepSelector::Uniform);
        s.record_all_steps = true;
        let buf = collect(&field, &s, &[5]).unwrap();
        assert_eq!(buf.len(), 32 * 2 * 4);
        for r in &buf.records {
            assert_eq!(r.reward, buf.episodes[r.env_idx].reward);
        }
    }

    #[test]
    fn collection_is_replayable() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let s = spec(&env, &schedule, StepSelector::Uniform);
        assert_eq!(collect(&bandit_field(), &s, &[3, 1]).unwrap(), collect(&bandit_field(), &s, &[3, 1]).unwrap());
        assert_ne!(collect(&bandit_field(), &s, &[3, 1]).unwrap(), collect(&bandit_field(), &s, &[3, 2]).unwrap());
    }

    #[test]
    fn step_wise_target_reproduces_recorded_mean() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let buf = collect(&bandit_field(), &spec(&env, &schedule, StepSelector::Uniform), &[9]).unwrap();
        for r in &buf.records {
            let (u, b) = affine_coefficients(r.t, r.delta, r.sigma).unwrap();
            let mean = r.target.mean(&r.v_old);
            for i in 0..2 {
                assert!((mean[i] - (u * r.x_t[i] + b * r.v_old[i])).abs() < 1e-15);
            }
            assert_eq!(r.observed, r.x_next);
        }
    }

    #[test]
    fn terminal_target_is_exact_for_zero_noise_tail() {
        // With ZeroNoise-equivalent chains the terminal mean under v_old must
        // reproduce the terminal state exactly.
        let schedule = SolverSchedule::uniform(4, 0.3, true).unwrap();
        let field = bandit_field();
        let chain = run_chain(
            &field,
            &schedule,
            &[0.4, -0.2],
            &[0.1, 0.5],
            &[],
            &mut crate::rng::ZeroNoise,
            SamplerMode::Sde,
        )
        .unwrap();
        for j in 0..4 {
            let (target, observed) = transition_target(&chain, &schedule, j, TargetKind::Terminal).unwrap();
            let mean = target.mean(&chain.velocities[j]);
            for i in 0..2 {
                assert!((mean[i] - observed[i]).abs() < 1e-12);
            }
            assert!(target.variance > 0.0);
        }
    }

    #[test]
    fn dump_round_trip() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let buf = collect(&bandit_field(), &spec(&env, &schedule, StepSelector::Uniform), &[1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("buffer");
        write_dump(&buf, &stem).unwrap();
        let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "env_idx,env_step,j,t,r");
        assert_eq!(csv.lines().count(), buf.len() + 1);
        let vectors = read_dump_vectors(&std::fs::read(stem.with_extension("bin")).unwrap()).unwrap();
        for (r, v) in buf.records.iter().zip(&vectors) {
            assert_eq!(v[0], r.x_t);
            assert_eq!(v[1], r.x_next);
            assert_eq!(v[2], r.v_old);
        }
    }

    #[test]
    fn advantage_credit_is_bounded() {
        let env = EnvConfig::default();
        let schedule = SolverSchedule::uniform(4, 0.2, true).unwrap();
        let mut buf = collect(&bandit_field(), &spec(&env, &schedule, StepSelector::Uniform), &[1]).unwrap();
        assign_credit(&mut buf, CreditKind::Advantage);
        assert!(buf.records.iter().all(|r| r.reward > 0.0 && r.reward < 1.0));
    }

    #[test]
    fn expert_evaluates_perfectly() {
        for env in [EnvConfig::default(), EnvConfig::reach_default()] {
            let s = evaluate(&ActingPolicy::Expert, &env, 64, 0).unwrap();
            assert_eq!(s.success_rate, 1.0);
        }
        assert!(evaluate(&ActingPolicy::Expert, &EnvConfig::default(), 0, 0).is_err());
    }
}
