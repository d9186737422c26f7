use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crtlab::harness::config::RunConfig;
use crtlab::harness::run::{read_summary, Summary};
use crtlab::metrics::{read_aes_csv, read_metric_csv, EvalReport, StabilityRow};

fn crtlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crtlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crtlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes prompts and a short two-stage config into `dir`.
fn setup(dir: &Path, steps: u64) -> PathBuf {
    ok(&["gen-prompts", "--n", "6", "--seed", "4", "--out", p(&dir.join("prompts.json"))]);
    let mut cfg = RunConfig::default();
    cfg.prompts = "prompts.json".into();
    cfg.output_dir = "run".into();
    cfg.hyper.total_steps = steps;
    cfg.hyper.stage1_budget = steps / 2;
    cfg.hyper.batch_size = 4;
    cfg.hyper.rollouts_per_prompt = 4;
    cfg.reference.k_ref = 8;
    cfg.checkpoint_every = 5;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let text = ok(&["config", "--print-defaults"]);
    let cfg = RunConfig::from_json_str(&text).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"checkpoint_every": 0}"#).unwrap();
    let out = crtlab(&["train", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = crtlab(&["train", "--config", p(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_step_run_writes_config_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 0);
    let stdout = ok(&["train", "--config", p(&cfg)]);
    assert!(stdout.contains("finished at step 0"));
    let run = dir.path().join("run");
    assert!(run.join("config.json").exists());
    assert!(run.join("checkpoints/checkpoint_000000.json").exists());
    assert_eq!(fs::read_to_string(run.join("steps.jsonl")).unwrap(), "");
    assert!(run.join("summary.json").exists());
    assert!(!run.join(".lock").exists());
}

#[test]
fn refuses_to_overwrite_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 0);
    ok(&["train", "--config", p(&cfg)]);
    let out = crtlab(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_compare_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d, 20);
    ok(&["train", "--config", p(&cfg)]);
    let run = d.join("run");
    let prompts = d.join("prompts.json");
    assert_eq!(fs::read_to_string(run.join("steps.jsonl")).unwrap().lines().count(), 20);

    let first = run.join("checkpoints/checkpoint_000000.json");
    let last = run.join("checkpoints/checkpoint_000020.json");
    let base = d.join("base.json");
    let model = d.join("model.json");
    let dump = d.join("rollouts.jsonl");
    ok(&["eval", "--checkpoint", p(&first), "--prompts", p(&prompts), "--rollouts", "8", "--out", p(&base)]);
    let stdout = ok(&[
        "eval", "--checkpoint", p(&last), "--prompts", p(&prompts), "--rollouts", "8", "--out", p(&model),
        "--dump-rollouts", p(&dump),
    ]);
    assert!(stdout.starts_with("acc "));
    let report = EvalReport::from_json_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(report.per_prompt.len(), 6);
    assert_eq!(report.rollouts, 8);
    assert!(read_metric_csv(&fs::read_to_string(d.join("model.csv")).unwrap())
        .unwrap()
        .iter()
        .any(|r| r.metric == "acc"));
    assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 48);

    let table = d.join("aes.csv");
    let stdout = ok(&[
        "compare", "--base", p(&base), "--model", p(&model), "--name", "crt", "--weights", "aes2", "--out",
        p(&table),
    ]);
    assert!(stdout.contains("crt AES2:"));
    let rows = read_aes_csv(&fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].method, "crt");
    assert!(rows[1].aes2 <= rows[1].aes1);

    let red = d.join("redundancy.json");
    assert!(ok(&["redundancy", "--log", p(&dump), "--out", p(&red)]).starts_with("r_all "));
    assert!(d.join("redundancy.csv").exists());

    let stab = d.join("stability.json");
    ok(&["stability", "--before", p(&base), "--after", p(&model), "--out", p(&stab)]);
    let row: StabilityRow = serde_json::from_str(&fs::read_to_string(&stab).unwrap()).unwrap();
    if row.n_len_down > 0 {
        let sum = row.ad_pct.unwrap() + row.ap_pct.unwrap() + row.ai_pct.unwrap();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    let traj = d.join("traj.csv");
    let stdout = ok(&[
        "sweep-checkpoints", "--run", p(&run), "--prompts", p(&prompts), "--rollouts", "4", "--out", p(&traj),
    ]);
    assert!(stdout.starts_with("5 checkpoints evaluated, 0 skipped"));
    let svg = d.join("len.svg");
    ok(&["plot", "--csv", p(&traj), "--column", "mean_len", "--out", p(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let out = crtlab(&["plot", "--csv", p(&traj), "--column", "nope", "--out", p(&svg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stop_and_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d, 20);
    ok(&["train", "--config", p(&cfg), "--out", p(&d.join("full"))]);
    let stdout = ok(&["train", "--config", p(&cfg), "--out", p(&d.join("cut")), "--stop-after", "12"]);
    assert!(stdout.contains("stopped at step 12"));
    assert!(!d.join("cut/summary.json").exists());
    ok(&["train", "--resume", p(&d.join("cut"))]);
    assert_eq!(
        fs::read(d.join("full/steps.jsonl")).unwrap(),
        fs::read(d.join("cut/steps.jsonl")).unwrap()
    );
    // the output directory is part of the config, so only the hash differs
    let full = read_summary(&d.join("full")).unwrap();
    let cut = read_summary(&d.join("cut")).unwrap();
    assert_ne!(full.config_hash, cut.config_hash);
    assert_eq!(Summary { config_hash: String::new(), ..full }, Summary { config_hash: String::new(), ..cut });
}

#[test]
fn resume_rejects_tampered_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d, 10);
    ok(&["train", "--config", p(&cfg), "--stop-after", "5"]);
    let run = d.join("run");

    let config_path = run.join("config.json");
    let original = fs::read_to_string(&config_path).unwrap();
    fs::write(&config_path, original.replace("\"seed\": 0", "\"seed\": 1")).unwrap();
    let out = crtlab(&["train", "--resume", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
    fs::write(&config_path, original).unwrap();

    ok(&["gen-prompts", "--n", "6", "--seed", "5", "--out", p(&d.join("prompts.json"))]);
    let out = crtlab(&["train", "--resume", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prompt set"));
}

#[test]
fn eval_with_single_rollout_leaves_lnorm_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d, 0);
    ok(&["train", "--config", p(&cfg)]);
    let out = d.join("k1.json");
    ok(&[
        "eval", "--checkpoint", p(&d.join("run/checkpoints/checkpoint_000000.json")), "--prompts",
        p(&d.join("prompts.json")), "--rollouts", "1", "--out", p(&out),
    ]);
    let report = EvalReport::from_json_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.mean_lnorm, None);
    assert!(fs::read_to_string(d.join("k1.csv")).unwrap().contains("NA"));
}
