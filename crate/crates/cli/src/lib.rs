//! Command-line driver: `train`, `ablate`, `verify`, `eval`, `sample`.
//!
//! Every command writes into a fresh run directory under the output root
//! (`--out`, else `STEPNFT_OUT`, else `runs`), named `<UTC stamp>-<hash8>`,
//! and every run directory gets a `manifest.json`.
//!
//! Exit codes: 0 success, 1 failure (a failed check, unreadable checkpoint,
//! runtime error), 2 usage or configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stepnft::ablation::{run_ablation, AblationAxis};
use stepnft::config::{hash_json, TrainConfig};
use stepnft::error::Error as CoreError;
use stepnft::manifest::{create_run_dir, RunManifest};
use stepnft::policy::VelocityField;
use stepnft::rng::{derive_seed, tag, NoiseSource, NoiseStream};
use stepnft::rollout::{evaluate, ActingPolicy};
use stepnft::solver::{run_chain, SamplerMode};
use stepnft::trainer::run_training;
use stepnft::verify::{flipped_gain_coefficients, report_csv, run_suite, summary, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stepnft", version, about = "Step-wise negative-aware fine-tuning of flow policies at toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune from the supervised init and save the policy.
    Train(TrainArgs),
    /// Run every arm of one ablation axis over shared seeds.
    Ablate(AblateArgs),
    /// Run the numerical verification suite.
    Verify(VerifyArgs),
    /// Estimate the success rate of a checkpoint or a reference policy.
    Eval(EvalArgs),
    /// Draw action chains from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set env.success_radius=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root for run directories.
    #[arg(long, env = "STEPNFT_OUT", default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// sampler, target, objective, credit, sigma, beta, alpha or step_select.
    #[arg(long)]
    pub axis: String,
    /// Seeds shared by every arm.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectedBug {
    /// Flip the sign of the velocity gain B.
    FlipGain,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per algebraic identity.
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Monte Carlo draws for the alignment check.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    /// Chains per sampler for the sampler consistency check.
    #[arg(long, default_value_t = 100_000)]
    pub chains: usize,
    #[arg(long, env = "STEPNFT_OUT", default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    /// Run the suite against deliberately broken coefficients.
    #[arg(long, value_enum, hide = true)]
    pub inject_bug: Option<InjectedBug>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Checkpoint,
    Expert,
    Random,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = PolicyKind::Checkpoint)]
    pub policy: PolicyKind,
    /// Required with `--policy checkpoint`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `eval_episodes` of the config.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ode,
    Sde,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Number of chains, one per environment reset.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sde)]
    pub mode: ModeArg,
}

/// A usage or configuration problem: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config { .. }) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Sample(args) => cmd_sample(&args),
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn stamp() -> String {
    Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

/// File config plus overrides; `--seed` is applied last.
pub fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(TrainConfig::from_toml_with_overrides(&text, &overrides)?)
}

fn write(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.artifacts.push(name.to_string());
    Ok(())
}

fn finish(dir: &Path, mut manifest: RunManifest) -> Result<()> {
    manifest.finished_at = now();
    manifest.write(dir)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let started = now();
    let dir = create_run_dir(&args.common.out, &stamp(), &config.hash())?;
    let mut manifest = RunManifest::new("train", config.echo(), vec![config.seed], started);
    // Written up front so no run directory ever lacks a manifest.
    manifest.write(&dir)?;
    write(&dir, "config.toml", &config.to_toml(), &mut manifest)?;

    let outcome = run_training(&config, None)?;
    outcome.policy.save(&dir.join("policy.ckpt"))?;
    manifest.artifacts.push("policy.ckpt".into());
    outcome.rollout_policy.save(&dir.join("rollout_policy.ckpt"))?;
    manifest.artifacts.push("rollout_policy.ckpt".into());
    write(&dir, "metrics.csv", &outcome.metrics_csv(), &mut manifest)?;
    write(&dir, "timing.csv", &outcome.timing_csv(), &mut manifest)?;
    manifest.summary.insert("init_success_rate".into(), json!(outcome.init_success_rate));
    manifest.summary.insert("final_success_rate".into(), json!(outcome.final_success_rate));
    println!(
        "success rate {:.4} -> {:.4} after {} iterations",
        outcome.init_success_rate, outcome.final_success_rate, config.iterations
    );
    finish(&dir, manifest)?;
    Ok(EXIT_OK)
}

fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let axis: AblationAxis = args.axis.parse().map_err(|e: CoreError| UsageError(e.to_string()))?;
    if args.seeds.is_empty() {
        return Err(UsageError("--seeds needs at least one seed".into()).into());
    }
    let base = resolve_config(&args.common)?;
    let started = now();
    let echo = json!({ "axis": axis.name(), "base": base.echo() });
    let dir = create_run_dir(&args.common.out, &stamp(), &hash_json(&echo))?;
    let mut manifest = RunManifest::new("ablate", echo, args.seeds.clone(), started);
    // Written up front so no run directory ever lacks a manifest.
    manifest.write(&dir)?;
    write(&dir, "base_config.toml", &base.to_toml(), &mut manifest)?;

    let mut failed: Option<anyhow::Error> = None;
    let result = run_ablation(&base, axis, &args.seeds, |run| {
        println!(
            "{:<20} seed {:<3} {:.4} -> {:.4}",
            run.arm, run.seed, run.outcome.init_success_rate, run.outcome.final_success_rate
        );
        let name = format!("arms/{}/seed{}/metrics.csv", run.arm, run.seed);
        let path = dir.join(&name);
        let res = std::fs::create_dir_all(path.parent().expect("nested path"))
            .and_then(|_| std::fs::write(&path, run.outcome.metrics_csv()));
        match res {
            Ok(()) => manifest.artifacts.push(name),
            Err(e) => failed = Some(anyhow::Error::new(e).context(format!("writing {}", path.display()))),
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    write(&dir, "comparison.csv", &result.comparison_csv(), &mut manifest)?;
    write(&dir, "summary.csv", &result.summary_csv(), &mut manifest)?;
    let mut arms = serde_json::Map::new();
    for s in result.summaries() {
        println!("{:<20} init {:.4} final {:.4} +- {:.4} ({} seeds)", s.arm, s.init_mean, s.final_mean, s.final_std, s.seeds);
        arms.insert(s.arm.clone(), json!({ "init_mean": s.init_mean, "final_mean": s.final_mean, "final_std": s.final_std }));
    }
    manifest.summary.insert("arms".into(), Value::Object(arms));
    finish(&dir, manifest)?;
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    if args.trials == 0 || args.samples == 0 || args.chains < 2 {
        return Err(UsageError("--trials and --samples must be positive and --chains at least 2".into()).into());
    }
    let mut suite = SuiteConfig {
        seed: args.seed,
        trials: args.trials,
        gradient_trials: args.trials.min(100),
        fd_instances: args.trials.min(50),
        alignment_samples: args.samples,
        sampler_chains: args.chains,
        ..SuiteConfig::default()
    };
    if args.inject_bug == Some(InjectedBug::FlipGain) {
        suite.coefficients = flipped_gain_coefficients;
    }
    let started = now();
    let echo = json!({
        "seed": args.seed,
        "trials": args.trials,
        "samples": args.samples,
        "chains": args.chains,
        "inject_bug": args.inject_bug.map(|_| "flip_gain"),
    });
    let dir = create_run_dir(&args.out, &stamp(), &hash_json(&echo))?;
    let mut manifest = RunManifest::new("verify", echo, vec![args.seed], started);
    // Written up front so no run directory ever lacks a manifest.
    manifest.write(&dir)?;
    let reports = run_suite(&suite)?;
    print!("{}", summary(&reports));
    write(&dir, "report.csv", &report_csv(&reports), &mut manifest)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| r.status == stepnft::verify::CheckStatus::Fail)
        .map(|r| r.name.as_str())
        .collect();
    manifest.summary.insert("checks".into(), json!(reports.len()));
    manifest.summary.insert("failed".into(), json!(failed));
    finish(&dir, manifest)?;
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + Z * Z / n;
    let centre = (p + Z * Z / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + Z * Z / (4.0 * n * n)).sqrt() / denom;
    // The endpoints are exact at p = 0 and p = 1; pin them against rounding.
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

pub const EVAL_HEADER: &str = "policy,episodes,successes,success_rate,ci_low,ci_high,seed";

fn load_checkpoint(path: &Path) -> Result<VelocityField> {
    VelocityField::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    let episodes = args.episodes.unwrap_or(config.eval_episodes);
    if episodes == 0 {
        return Err(UsageError("--episodes must be at least 1".into()).into());
    }
    let seed = args.common.seed.unwrap_or(config.eval_seed);
    let field = match args.policy {
        PolicyKind::Checkpoint => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| UsageError("--policy checkpoint needs --checkpoint PATH".into()))?;
            let field = load_checkpoint(path)?;
            if field.architecture() != &config.architecture()? {
                anyhow::bail!(
                    "checkpoint {} does not fit the configured environment and network",
                    path.display()
                );
            }
            Some(field)
        }
        _ => None,
    };
    let schedule = config.schedule()?;
    let policy = match (&field, args.policy) {
        (Some(f), _) => ActingPolicy::Field(f, &schedule),
        (None, PolicyKind::Expert) => ActingPolicy::Expert,
        _ => ActingPolicy::Random,
    };
    let started = now();
    let mut echo = json!({ "config": config.echo(), "policy": format!("{:?}", args.policy).to_lowercase(), "episodes": episodes, "seed": seed });
    if let Some(p) = &args.checkpoint {
        echo["checkpoint"] = json!(p.display().to_string());
    }
    let dir = create_run_dir(&args.common.out, &stamp(), &hash_json(&echo))?;
    let mut manifest = RunManifest::new("eval", echo, vec![seed], started);
    // Written up front so no run directory ever lacks a manifest.
    manifest.write(&dir)?;

    let result = evaluate(&policy, &config.env, episodes, seed)?;
    let (lo, hi) = wilson_interval(result.successes, result.episodes);
    let name = format!("{:?}", args.policy).to_lowercase();
    println!(
        "success_rate {:.4} (95% CI [{lo:.4}, {hi:.4}]) over {} episodes",
        result.success_rate, result.episodes
    );
    let csv = format!(
        "{EVAL_HEADER}\n{name},{},{},{:?},{lo:?},{hi:?},{seed}\n",
        result.episodes, result.successes, result.success_rate
    );
    write(&dir, "eval.csv", &csv, &mut manifest)?;
    manifest.summary.insert("success_rate".into(), json!(result.success_rate));
    manifest.summary.insert("ci95".into(), json!([lo, hi]));
    finish(&dir, manifest)?;
    Ok(EXIT_OK)
}

fn cmd_sample(args: &SampleArgs) -> Result<i32> {
    let config = resolve_config(&args.common)?;
    if args.count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let field = load_checkpoint(&args.checkpoint)?;
    if field.architecture() != &config.architecture()? {
        anyhow::bail!("checkpoint does not fit the configured environment and network");
    }
    let mode = match args.mode {
        ModeArg::Ode => SamplerMode::Ode,
        ModeArg::Sde => SamplerMode::Sde,
    };
    let schedule = config.schedule()?;
    let started = now();
    let echo = json!({
        "config": config.echo(),
        "checkpoint": args.checkpoint.display().to_string(),
        "count": args.count,
        "mode": format!("{:?}", args.mode).to_lowercase(),
    });
    let dir = create_run_dir(&args.common.out, &stamp(), &hash_json(&echo))?;
    let mut manifest = RunManifest::new("sample", echo, vec![config.seed], started);
    // Written up front so no run directory ever lacks a manifest.
    manifest.write(&dir)?;

    let dim = field.architecture().state_dim;
    let mut csv = String::from("sample,j,t");
    for k in 0..dim {
        write!(csv, ",x{k}").expect("string write");
    }
    csv.push('\n');
    let mut env = config.env.build()?;
    for i in 0..args.count as u64 {
        let obs = env.reset(derive_seed(&[tag::EVAL, config.seed, i]));
        let mut noise = NoiseStream::keyed(&[tag::EVAL, config.seed, i, u64::MAX]);
        let mut x1 = vec![0.0; dim];
        noise.fill_standard_normal(&mut x1);
        let chain = run_chain(&field, &schedule, &x1, &obs.context, &obs.observation, &mut noise, mode)?;
        for (j, state) in chain.states.iter().enumerate() {
            write!(csv, "{i},{j},{:?}", schedule.times()[j]).expect("string write");
            for x in state {
                write!(csv, ",{x:?}").expect("string write");
            }
            csv.push('\n');
        }
    }
    write(&dir, "samples.csv", &csv, &mut manifest)?;
    finish(&dir, manifest)?;
    Ok(EXIT_OK)
}
