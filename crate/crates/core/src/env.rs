//! Seeded toy tasks with a sparse terminal reward.
//!
//! * [`BanditEnv`]: one step. The context `c ~ U[-1, 1]^2` is drawn at reset;
//!   the target action is `a*(c) = M c` with `M = [[0.5, 0.3], [-0.3, 0.5]]`,
//!   and the reward is 1 iff `|a - a*(c)| <= success_radius`.
//! * [`ReachEnv`]: a point in the arena `[-1, 1]^2` moving toward a goal. One
//!   env step consumes an action chunk of `chunk` displacement pairs, applied
//!   in order, each clipped to length `max_step` and the position clamped to
//!   the arena. After `horizon` env steps the reward is 1 iff the agent ends
//!   within `success_radius` of the goal.
//!
//! Reset draws come from the keyed stream `(ENV_RESET, seed)`: the bandit
//! draws `c` (two uniforms on `[-1, 1)`); reach draws the start and then the
//! goal, each two uniforms on `[-0.8, 0.8)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{keyed_rng, tag};

pub const TARGET_MAP: [[f64; 2]; 2] = [[0.5, 0.3], [-0.3, 0.5]];
pub const ARENA: f64 = 1.0;
const REACH_SPAWN: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Bandit {
        #[serde(default = "default_bandit_radius")]
        success_radius: f64,
    },
    Reach {
        #[serde(default = "default_reach_radius")]
        success_radius: f64,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default = "default_chunk")]
        chunk: usize,
        #[serde(default = "default_max_step")]
        max_step: f64,
    },
}

fn default_bandit_radius() -> f64 {
    0.1
}
fn default_reach_radius() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    2
}
fn default_chunk() -> usize {
    5
}
fn default_max_step() -> f64 {
    0.4
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Bandit {
            success_radius: default_bandit_radius(),
        }
    }
}

impl EnvConfig {
    pub fn reach_default() -> Self {
        EnvConfig::Reach {
            success_radius: default_reach_radius(),
            horizon: default_horizon(),
            chunk: default_chunk(),
            max_step: default_max_step(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        match *self {
            EnvConfig::Bandit { success_radius } => positive("env.success_radius", success_radius),
            EnvConfig::Reach {
                success_radius,
                horizon,
                chunk,
                max_step,
            } => {
                positive("env.success_radius", success_radius)?;
                positive("env.max_step", max_step)?;
                if horizon == 0 {
                    return Err(Error::config("env.horizon", "must be at least 1"));
                }
                if chunk == 0 {
                    return Err(Error::config("env.chunk", "must be at least 1"));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Env> {
        self.validate()?;
        Ok(match *self {
            EnvConfig::Bandit { success_radius } => Env::Bandit(BanditEnv::new(success_radius)),
            EnvConfig::Reach {
                success_radius,
                horizon,
                chunk,
                max_step,
            } => Env::Reach(ReachEnv::new(success_radius, horizon, chunk, max_step)),
        })
    }
}

/// What the policy sees before choosing an action.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub observation: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    pub success_radius: f64,
    context: Vec<f64>,
    done: bool,
}

impl BanditEnv {
    pub fn new(success_radius: f64) -> Self {
        Self {
            success_radius,
            context: vec![0.0; 2],
            done: true,
        }
    }

    pub fn target(context: &[f64]) -> Vec<f64> {
        TARGET_MAP
            .iter()
            .map(|row| row[0] * context[0] + row[1] * context[1])
            .collect()
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    fn observe(&self) -> Observation {
        Observation {
            observation: Vec::new(),
            context: self.context.clone(),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = keyed_rng(&[tag::ENV_RESET, seed]);
        self.context = (0..2).map(|_| rng.random_range(-ARENA..ARENA)).collect();
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_len("bandit action", action.len(), 2)?;
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        self.done = true;
        let target = Self::target(&self.context);
        let dist = distance(action, &target);
        Ok(StepOutcome {
            observation: self.observe(),
            done: true,
            reward: if dist <= self.success_radius { 1.0 } else { 0.0 },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachEnv {
    pub success_radius: f64,
    pub horizon: usize,
    pub chunk: usize,
    pub max_step: f64,
    position: [f64; 2],
    goal: [f64; 2],
    steps_taken: usize,
}

impl ReachEnv {
    pub fn new(success_radius: f64, horizon: usize, chunk: usize, max_step: f64) -> Self {
        Self {
            success_radius,
            horizon,
            chunk,
            max_step,
            position: [0.0; 2],
            goal: [0.0; 2],
            steps_taken: horizon,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Places the agent and goal directly; used by tests and hand-built episodes.
    pub fn set_state(&mut self, position: [f64; 2], goal: [f64; 2]) {
        self.position = position;
        self.goal = goal;
        self.steps_taken = 0;
    }

    fn observe(&self) -> Observation {
        Observation {
            observation: vec![self.position[0], self.position[1], self.goal[0], self.goal[1]],
            context: Vec::new(),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = keyed_rng(&[tag::ENV_RESET, seed]);
        let mut draw = || rng.random_range(-REACH_SPAWN..REACH_SPAWN);
        self.position = [draw(), draw()];
        self.goal = [draw(), draw()];
        self.steps_taken = 0;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_len("reach action", action.len(), 2 * self.chunk)?;
        if self.steps_taken >= self.horizon {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        for pair in action.chunks_exact(2) {
            let len = pair[0].hypot(pair[1]);
            let scale = if len > self.max_step { self.max_step / len } else { 1.0 };
            for k in 0..2 {
                self.position[k] = (self.position[k] + scale * pair[k]).clamp(-ARENA, ARENA);
            }
        }
        self.steps_taken += 1;
        let done = self.steps_taken == self.horizon;
        let reward = if done && distance(&self.position, &self.goal) <= self.success_radius {
            1.0
        } else {
            0.0
        };
        Ok(StepOutcome {
            observation: self.observe(),
            done,
            reward,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Bandit(BanditEnv),
    Reach(ReachEnv),
}

impl Env {
    pub fn action_dim(&self) -> usize {
        match self {
            Env::Bandit(_) => 2,
            Env::Reach(e) => 2 * e.chunk,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Env::Bandit(_) => 2,
            Env::Reach(_) => 0,
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            Env::Bandit(_) => 0,
            Env::Reach(_) => 4,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::Bandit(_) => 1,
            Env::Reach(e) => e.horizon,
        }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        match self {
            Env::Bandit(e) => e.reset(seed),
            Env::Reach(e) => e.reset(seed),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        match self {
            Env::Bandit(e) => e.step(action),
            Env::Reach(e) => e.step(action),
        }
    }

    /// Hand-coded expert for the current state. The bandit expert plays
    /// `a*(c)`; the reach expert splits the remaining straight line to the
    /// goal evenly over every displacement left in the episode.
    pub fn expert_action(&self) -> Vec<f64> {
        match self {
            Env::Bandit(e) => BanditEnv::target(&e.context),
            Env::Reach(e) => {
                let remaining = (e.horizon - e.steps_taken.min(e.horizon)).max(1) * e.chunk;
                let step = [
                    (e.goal[0] - e.position[0]) / remaining as f64,
                    (e.goal[1] - e.position[1]) / remaining as f64,
                ];
                (0..e.chunk).flat_map(|_| step).collect()
            }
        }
    }

    /// Uniform action over the action box: `[-1, 1]^2` for the bandit and
    /// `[-max_step, max_step]^2` per displacement for reach.
    pub fn random_action(&self, rng: &mut impl Rng) -> Vec<f64> {
        let half = match self {
            Env::Bandit(_) => ARENA,
            Env::Reach(e) => e.max_step,
        };
        (0..self.action_dim()).map(|_| rng.random_range(-half..half)).collect()
    }

    /// Probability that a uniform random bandit action succeeds: the success
    /// disc always lies inside the action box, so this is the area ratio.
    pub fn bandit_random_success(success_radius: f64) -> f64 {
        std::f64::consts::PI * success_radius * success_radius / (2.0 * ARENA).powi(2)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One demonstration step: the expert action plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub observation: Observation,
    pub action: Vec<f64>,
}

/// Plays `episodes` noisy expert episodes with reset seeds `(DEMO, seed, i)`.
pub fn expert_demos(config: &EnvConfig, episodes: usize, noise_std: f64, seed: u64) -> Result<Vec<Demo>> {
    let mut env = config.build()?;
    let mut demos = Vec::new();
    for i in 0..episodes as u64 {
        let mut obs = env.reset(crate::rng::derive_seed(&[tag::DEMO, seed, i]));
        let mut noise = keyed_rng(&[tag::DEMO, seed, i, 1]);
        loop {
            let mut action = env.expert_action();
            for a in &mut action {
                let z: f64 = noise.sample(rand_distr::StandardNormal);
                *a += noise_std * z;
            }
            let outcome = env.step(&action)?;
            demos.push(Demo {
                observation: obs,
                action,
            });
            obs = outcome.observation;
            if outcome.done {
                break;
            }
        }
    }
    Ok(demos)
}

/// Text trajectory of one episode under the expert, used as a golden file.
pub fn golden_trajectory(config: &EnvConfig, seed: u64) -> Result<String> {
    use std::fmt::Write as _;
    let mut env = config.build()?;
    let mut out = String::new();
    let obs = env.reset(seed);
    let _ = writeln!(out, "# reset seed={seed}");
    let _ = writeln!(out, "observation {}", join(&obs.observation));
    let _ = writeln!(out, "context {}", join(&obs.context));
    let mut step = 0;
    loop {
        let action = env.expert_action();
        let outcome = env.step(&action)?;
        let _ = writeln!(out, "step {step} action {}", join(&action));
        let _ = writeln!(
            out,
            "step {step} observation {} done={} reward={}",
            join(&outcome.observation.observation),
            outcome.done,
            outcome.reward
        );
        step += 1;
        if outcome.done {
            break;
        }
    }
    Ok(out)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}
