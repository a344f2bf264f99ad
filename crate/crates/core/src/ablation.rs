//! Ablation arms over one config axis.
//!
//! Every arm is a set of `key=value` overrides applied on top of a base
//! config. Arms share the seed list, and for each seed they share the same
//! supervised init, so arms differ only in the ablated component.

use std::fmt;
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::VelocityField;
use crate::trainer::{run_training, sft_init, TrainingOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Sampler,
    Target,
    Objective,
    Credit,
    Sigma,
    Beta,
    Alpha,
    StepSelect,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::Sampler,
        AblationAxis::Target,
        AblationAxis::Objective,
        AblationAxis::Credit,
        AblationAxis::Sigma,
        AblationAxis::Beta,
        AblationAxis::Alpha,
        AblationAxis::StepSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Sampler => "sampler",
            AblationAxis::Target => "target",
            AblationAxis::Objective => "objective",
            AblationAxis::Credit => "credit",
            AblationAxis::Sigma => "sigma",
            AblationAxis::Beta => "beta",
            AblationAxis::Alpha => "alpha",
            AblationAxis::StepSelect => "step_select",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::config("axis", format!("unknown axis `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
}

fn arm(name: &str, overrides: &[&str]) -> Arm {
    Arm {
        name: name.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

pub const SIGMA_GRID: [f64; 3] = [0.05, 0.2, 0.5];
pub const BETA_GRID: [f64; 3] = [0.5, 1.0, 2.0];

/// The arm set of an axis. `k` is the solver step count of the base config,
/// which fixes the step-selection arms.
pub fn arms(axis: AblationAxis, k: usize) -> Vec<Arm> {
    match axis {
        AblationAxis::Sampler => vec![
            // Deterministic rollouts supervised at the chain endpoint.
            arm("ode_terminal", &["sampler=ode", "target=terminal_endpoint"]),
            // Noisy rollouts, endpoint supervision without mean correction.
            arm("sde_naive", &["sampler=sde", "target=terminal_endpoint"]),
            arm("sde_mean_corrected", &["sampler=sde", "target=terminal"]),
            arm("sde_step_wise", &["sampler=sde", "target=step_wise"]),
        ],
        AblationAxis::Target => vec![
            arm("step_wise", &["target=step_wise"]),
            arm("terminal", &["target=terminal"]),
            arm("terminal_endpoint", &["target=terminal_endpoint"]),
        ],
        AblationAxis::Objective => ["ranking", "wmse", "positive_only", "negative_only"]
            .iter()
            .map(|o| arm(o, &[&format!("objective={o}")]))
            .collect(),
        AblationAxis::Credit => vec![arm("binary", &["credit=binary"]), arm("advantage", &["credit=advantage"])],
        AblationAxis::Sigma => SIGMA_GRID
            .iter()
            .map(|s| arm(&format!("sigma_{s}"), &[&format!("sigma={s}")]))
            .collect(),
        AblationAxis::Beta => BETA_GRID
            .iter()
            .map(|b| arm(&format!("beta_{b}"), &[&format!("beta={b}")]))
            .collect(),
        AblationAxis::Alpha => vec![
            arm("constant_0.1", &["alpha_schedule=constant", "alpha_start=0.1", "alpha_end=0.995"]),
            arm("constant_0.995", &["alpha_schedule=constant", "alpha_start=0.995", "alpha_end=0.995"]),
            arm("linear_0.1_0.995", &["alpha_schedule=linear", "alpha_start=0.1", "alpha_end=0.995"]),
        ],
        AblationAxis::StepSelect => std::iter::once(arm("uniform", &["step_select=uniform"]))
            .chain((0..k).map(|j| arm(&format!("fixed_{j}"), &[&format!("step_select=fixed:{j}")])))
            .collect(),
    }
}

/// Resolves an arm against a base config with a given seed.
pub fn arm_config(base: &TrainConfig, arm: &Arm, seed: u64) -> Result<TrainConfig> {
    let mut overrides = arm.overrides.clone();
    overrides.push(format!("seed={seed}"));
    TrainConfig::from_toml_with_overrides(&base.to_toml(), &overrides)
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub outcome: TrainingOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub init_mean: f64,
    pub final_mean: f64,
    pub final_std: f64,
}

pub const COMPARISON_HEADER: &str = "axis,arm,seed,init_success_rate,final_success_rate";
pub const SUMMARY_HEADER: &str = "axis,arm,seeds,init_mean,final_mean,final_std";

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub runs: Vec<ArmRun>,
}

impl AblationResult {
    /// Per-arm means in arm order.
    pub fn summaries(&self) -> Vec<ArmSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.arm.as_str()) {
                order.push(&r.arm);
            }
        }
        order
            .into_iter()
            .map(|name| {
                let runs: Vec<&ArmRun> = self.runs.iter().filter(|r| r.arm == name).collect();
                let n = runs.len() as f64;
                let init_mean = runs.iter().map(|r| r.outcome.init_success_rate).sum::<f64>() / n;
                let final_mean = runs.iter().map(|r| r.outcome.final_success_rate).sum::<f64>() / n;
                let var = runs
                    .iter()
                    .map(|r| (r.outcome.final_success_rate - final_mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0).max(1.0);
                ArmSummary {
                    arm: name.to_string(),
                    seeds: runs.len(),
                    init_mean,
                    final_mean,
                    final_std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn final_mean(&self, arm: &str) -> Option<f64> {
        self.summaries().into_iter().find(|s| s.arm == arm).map(|s| s.final_mean)
    }

    pub fn comparison_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{:?},{:?}\n",
                self.axis, r.arm, r.seed, r.outcome.init_success_rate, r.outcome.final_success_rate
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in self.summaries() {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                self.axis, s.arm, s.seeds, s.init_mean, s.final_mean, s.final_std
            ));
        }
        out
    }
}

/// Runs every arm of `axis` for every seed. The supervised init is trained
/// once per seed from the base config and shared by all arms. `progress`
/// sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
    seeds: &[u64],
    mut progress: impl FnMut(&ArmRun),
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let arm_set = arms(axis, base.k);
    let mut inits: Vec<VelocityField> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        inits.push(sft_init(&cfg)?);
    }
    let mut runs = Vec::new();
    for a in &arm_set {
        for (&seed, init) in seeds.iter().zip(&inits) {
            let config = arm_config(base, a, seed)?;
            let outcome = run_training(&config, Some(init))?;
            let run = ArmRun {
                arm: a.name.clone(),
                seed,
                config,
                outcome,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationResult { axis, runs })
}
