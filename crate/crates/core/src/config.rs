//! Training configuration.
//!
//! Configs are TOML. Top-level keys hold the training hyperparameters; the
//! tables `[optimizer]`, `[env]`, `[net]` and `[sft]` hold the rest. Every key
//! is optional and falls back to [`TrainConfig::default`]. Overrides use dotted
//! paths (`env.success_radius=0.15`); the value is read as a TOML literal, and
//! anything that is not a valid literal is taken as a bare string, so
//! `objective=wmse` works without quotes. An `[env]` table without `kind`
//! is a bandit.
//!
//! The config hash is the SHA-256 of the resolved config serialized as JSON
//! with sorted keys.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::objective::ObjectiveKind;
use crate::optim::OptimizerConfig;
use crate::policy::{Activation, Architecture};
use crate::rollout::{CreditKind, StepSelector, TargetKind};
use crate::sft::SftConfig;
use crate::solver::{SamplerMode, SolverSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// `alpha_start + (alpha_end - alpha_start) * m / total`.
    Linear,
    /// `alpha_start` throughout.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Parallel environments per rollout epoch.
    pub envs: usize,
    /// Rollout epochs per iteration; each collects `envs` episodes.
    pub rollout_epochs: usize,
    pub update_epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub sigma: f64,
    pub k: usize,
    /// Inject noise on the last solver step too. When off, the last step is
    /// a plain Euler step.
    pub final_step_noise: bool,
    pub lambda_tr: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub alpha_schedule: AlphaSchedule,
    pub objective: ObjectiveKind,
    pub sampler: SamplerMode,
    pub target: TargetKind,
    pub step_select: StepSelector,
    pub credit: CreditKind,
    /// Record all K transitions per env step instead of one.
    pub record_all_steps: bool,
    pub eval_episodes: usize,
    /// Evaluate (and emit a metrics row) every this many iterations, and
    /// always after the last one.
    pub eval_every: usize,
    pub eval_seed: u64,
    /// Write measured seconds into metrics.csv. Off by default so that runs
    /// with the same config are byte-identical; timings always go to
    /// timing.csv.
    pub wall_clock_metrics: bool,
    pub optimizer: OptimizerConfig,
    pub env: EnvConfig,
    pub net: NetConfig,
    pub sft: SftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 400,
            envs: 64,
            rollout_epochs: 8,
            update_epochs: 2,
            batch_size: 64,
            beta: 1.0,
            sigma: 0.2,
            k: 4,
            final_step_noise: true,
            lambda_tr: 0.0,
            alpha_start: 0.1,
            alpha_end: 0.995,
            alpha_schedule: AlphaSchedule::Linear,
            objective: ObjectiveKind::Ranking,
            sampler: SamplerMode::Sde,
            target: TargetKind::StepWise,
            step_select: StepSelector::Uniform,
            credit: CreditKind::Binary,
            record_all_steps: false,
            eval_episodes: 512,
            eval_every: 10,
            eval_seed: 7919,
            wall_clock_metrics: false,
            optimizer: OptimizerConfig::default(),
            env: EnvConfig::default(),
            net: NetConfig::default(),
            sft: SftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end && self.alpha_end < 1.0) {
            return Err(Error::config(
                "alpha_start/alpha_end",
                format!("need 0 <= alpha_start <= alpha_end < 1, got {} and {}", self.alpha_start, self.alpha_end),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be positive, got {}", self.beta)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.lambda_tr >= 0.0) {
            return Err(Error::config("lambda_tr", "must be >= 0"));
        }
        for (field, v) in [
            ("envs", self.envs),
            ("rollout_epochs", self.rollout_epochs),
            ("update_epochs", self.update_epochs),
            ("batch_size", self.batch_size),
            ("eval_episodes", self.eval_episodes),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if let StepSelector::Fixed(j) = self.step_select {
            if j >= self.k {
                return Err(Error::config("step_select", format!("fixed index {j} out of range for k = {}", self.k)));
            }
        }
        self.optimizer.validate("optimizer")?;
        self.env.validate()?;
        self.sft.validate()?;
        self.architecture()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let env = self.env.build()?;
        Architecture::new(
            env.action_dim(),
            env.context_dim(),
            env.observation_dim(),
            self.net.hidden.clone(),
            self.net.activation,
        )
        .map_err(|e| match e {
            Error::Config { message, .. } => Error::config("net.hidden", message),
            other => other,
        })
    }

    /// Rollout schedule: uniform grid with `sigma` on every step (the last
    /// one only when `final_step_noise` is on).
    pub fn schedule(&self) -> Result<SolverSchedule> {
        SolverSchedule::uniform(self.k, self.sigma, self.final_step_noise)
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<config file>", e.message().to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        if let Some(env) = table.get_mut("env").and_then(toml::Value::as_table_mut) {
            env.entry("kind").or_insert_with(|| toml::Value::String("bandit".into()));
        }
        let config: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hash_json(&self.echo())
    }
}

/// SHA-256 hex digest of a JSON value with sorted object keys.
pub fn hash_json(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("json serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::config(item, "empty key"));
    }
    let value = parse_literal(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = TrainConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.sigma, 0.2);
        assert_eq!(c.k, 4);
        assert_eq!(c.alpha_start, 0.1);
        assert_eq!(c.alpha_end, 0.995);
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "objective = \"ranking\"\n[env]\nkind = \"bandit\"\nsuccess_radius = 0.2\n";
        let c = TrainConfig::from_toml_with_overrides(
            text,
            &[
                "objective=wmse".into(),
                "env.success_radius=0.15".into(),
                "step_select=fixed:2".into(),
                "net.hidden=[8, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.objective, ObjectiveKind::Wmse);
        assert_eq!(c.env, EnvConfig::Bandit { success_radius: 0.15 });
        assert_eq!(c.step_select, StepSelector::Fixed(2));
        assert_eq!(c.net.hidden, vec![8, 8]);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::default();
        c.env = EnvConfig::reach_default();
        c.step_select = StepSelector::Fixed(1);
        let back = TrainConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let err = TrainConfig::from_toml_with_overrides("", &["beta=0".into()]).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
        let err = TrainConfig::from_toml_with_overrides("bogus = 1", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = TrainConfig::from_toml_with_overrides("[env]\nkind = \"bandit\"\nhorizon = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
        let err = TrainConfig::from_toml_with_overrides("", &["alpha_start=0.999".into()]).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let err = TrainConfig::from_toml_with_overrides("", &["step_select=fixed:4".into()]).unwrap_err();
        assert!(err.to_string().contains("step_select"), "{err}");
        assert!(TrainConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(hash_json(&a.echo()), a.hash());
    }
}
