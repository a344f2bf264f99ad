use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stepnft::manifest::RunManifest;

fn stepnft(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepnft"))
        .args(args)
        .env("STEPNFT_OUT", out)
        .output()
        .expect("binary runs")
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .map(|it| it.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs = run_dirs(out);
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "net.hidden=[8]",
    "--set",
    "sft.steps=20",
    "--set",
    "envs=8",
    "--set",
    "rollout_epochs=1",
    "--set",
    "eval_episodes=32",
    "--set",
    "eval_every=1",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    stepnft(out, &args)
}

#[test]
fn zero_iteration_train_writes_manifest_and_empty_metrics() {
    let out = tempfile::tempdir().unwrap();
    let o = train(out.path(), &["--set", "iterations=0", "--set", "objective=wmse"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = only_run_dir(out.path());
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics,
        "iter,success_rate,loss_mean,e_plus_mean,e_minus_mean,delta_v_norm,grad_norm,alpha,seconds\n"
    );
    let manifest = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert!(manifest.hash_is_consistent());
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.config["objective"], "wmse");
    assert_eq!(manifest.config["iterations"], 0);
    for artifact in &manifest.artifacts {
        assert!(dir.join(artifact).exists(), "{artifact}");
    }
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with(&manifest.config_hash[..8]));
}

#[test]
fn config_file_then_overrides() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("c.toml");
    std::fs::write(&cfg, "iterations = 0\nbeta = 0.5\n[env]\nkind = \"bandit\"\nsuccess_radius = 0.2\n").unwrap();
    let runs = out.path().join("runs");
    let o = train(&runs, &["--config", cfg.to_str().unwrap(), "--set", "beta=2.0", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read(&only_run_dir(&runs).join("manifest.json")).unwrap();
    assert_eq!(m.config["beta"], 2.0);
    assert_eq!(m.config["env"]["success_radius"], 0.2);
    assert_eq!(m.seeds, vec![9]);
}

#[test]
fn same_config_twice_gives_identical_metrics_in_new_dirs() {
    let out = tempfile::tempdir().unwrap();
    for _ in 0..2 {
        let o = train(out.path(), &["--set", "iterations=3", "--seed", "4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let dirs = run_dirs(out.path());
    assert_eq!(dirs.len(), 2, "run directories must never be reused");
    let a = std::fs::read(dirs[0].join("metrics.csv")).unwrap();
    let b = std::fs::read(dirs[1].join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn invalid_config_names_the_field() {
    let out = tempfile::tempdir().unwrap();
    let o = train(out.path(), &["--set", "sigma=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
    let o = train(out.path(), &["--set", "bogus_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
    assert!(run_dirs(out.path()).is_empty());
}

#[test]
fn eval_reference_policies() {
    let out = tempfile::tempdir().unwrap();
    let o = stepnft(out.path(), &["eval", "--policy", "expert", "--set", "env.kind=reach", "--episodes", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(only_run_dir(out.path()).join("eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(csv.lines().next().unwrap(), "policy,episodes,successes,success_rate,ci_low,ci_high,seed");
    assert_eq!(row[0], "expert");
    assert_eq!(row[3], "1.0");

    let out = tempfile::tempdir().unwrap();
    let o = stepnft(
        out.path(),
        &["eval", "--policy", "random", "--set", "env.success_radius=0.4", "--episodes", "4000"],
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(only_run_dir(out.path()).join("eval.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let oracle = std::f64::consts::PI * 0.4 * 0.4 / 4.0;
    assert!(row[3] <= oracle && oracle <= row[4], "{oracle} outside [{}, {}]", row[3], row[4]);
}

#[test]
fn eval_usage_and_checkpoint_errors() {
    let out = tempfile::tempdir().unwrap();
    let o = stepnft(out.path(), &["eval", "--policy", "random", "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = out.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = stepnft(out.path(), &["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));

    let o = stepnft(out.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2), "checkpoint policy needs --checkpoint");
}

#[test]
fn trained_checkpoint_evaluates_and_samples() {
    let out = tempfile::tempdir().unwrap();
    let runs = out.path().join("train");
    assert!(train(&runs, &["--set", "iterations=1"]).status.success());
    let ckpt = only_run_dir(&runs).join("policy.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let evals = out.path().join("eval");
    let o = stepnft(&evals, &["eval", "--checkpoint", ckpt, "--set", "net.hidden=[8]", "--episodes", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("95% CI"));

    // Wrong architecture for the checkpoint.
    let o = stepnft(&evals, &["eval", "--checkpoint", ckpt, "--episodes", "16"]);
    assert_eq!(o.status.code(), Some(1));

    let samples = out.path().join("sample");
    let o = stepnft(&samples, &["sample", "--checkpoint", ckpt, "--set", "net.hidden=[8]", "--count", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(only_run_dir(&samples).join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sample,j,t,x0,x1");
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}

#[test]
fn verify_mutation_is_caught() {
    let out = tempfile::tempdir().unwrap();
    let small = ["verify", "--trials", "200", "--samples", "20000", "--chains", "2000"];
    let o = stepnft(out.path(), &small);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let mut mutated = small.to_vec();
    mutated.extend_from_slice(&["--inject-bug", "flip-gain"]);
    let o = stepnft(out.path(), &mutated);
    assert_eq!(o.status.code(), Some(1));
    let dirs = run_dirs(out.path());
    let report = dirs
        .iter()
        .map(|d| std::fs::read_to_string(d.join("report.csv")).unwrap())
        .find(|r| r.contains(",fail,"))
        .expect("mutated report");
    assert_eq!(report.lines().next().unwrap(), "name,status,discrepancy,tolerance,samples,seed");
    for check in ["affine_coefficients", "gradient_form"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{check},fail,"))), "{report}");
    }
}

#[test]
fn verify_single_trial_runs() {
    let out = tempfile::tempdir().unwrap();
    let o = stepnft(out.path(), &["verify", "--trials", "1", "--samples", "1000", "--chains", "100"]);
    assert!(o.status.code().is_some());
    let report = std::fs::read_to_string(only_run_dir(out.path()).join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 12);
}

#[test]
fn ablate_small_axis() {
    let out = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "credit", "--seeds", "0,1"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "iterations=1"]);
    let o = stepnft(out.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = only_run_dir(out.path());
    let comparison = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 1 + 2 * 2);
    assert!(comparison.starts_with("axis,arm,seed,init_success_rate,final_success_rate\n"));
    assert!(dir.join("arms/advantage/seed1/metrics.csv").exists());
    let m = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert!(m.hash_is_consistent());
    assert_eq!(m.seeds, vec![0, 1]);

    let o = stepnft(out.path(), &["ablate", "--axis", "colour"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wilson_interval_brackets_estimate() {
    let (lo, hi) = stepnft_cli::wilson_interval(50, 100);
    assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4);
    assert_eq!(stepnft_cli::wilson_interval(10, 10).1, 1.0);
}
