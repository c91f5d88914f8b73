use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fedcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcl"))
        .current_dir(dir)
        .env_remove("FEDCL_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Writes a MovieLens-style file where every user and item has at least 5 ratings.
fn write_movielens(path: &Path) -> usize {
    let mut text = String::new();
    let mut lines = 0;
    for u in 1..=12 {
        for k in 0..6 {
            let item = (u + k) % 9 + 1;
            text.push_str(&format!("{u}::{item}::4::{}\n", 1000 + u * 10 + k));
            lines += 1;
        }
    }
    fs::write(path, text).unwrap();
    lines
}

fn synth(dir: &Path) {
    ok(&fedcl(
        dir,
        &["synth", "--out", "data", "num_users=60", "num_items=80", "num_clusters=3", "cluster_items=60"],
    ));
}

const FAST: &[&str] = &[
    "--dataset.path",
    "data",
    "model.dim=8",
    "federation.users_per_round=4",
    "federation.max_rounds=6",
    "federation.eval_every=3",
    "cluster.count=3",
    "log.timings=false",
];

#[test]
fn ingest_writes_artifacts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let lines = write_movielens(&dir.path().join("ratings.dat"));
    let run = |out: &str| {
        ok(&fedcl(dir.path(), &["ingest", "--format", "movielens", "ratings.dat", "--out", out]));
    };
    run("a");
    run("b");
    let raw = fs::read_to_string(dir.path().join("a/raw_stats.txt")).unwrap();
    assert!(raw.contains("num_users=12\n"));
    assert!(raw.contains(&format!("num_actions={lines}\n")));
    for f in ["sequences.tsv", "users.map", "items.map", "stats.txt", "raw_stats.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let stats = fedcl(dir.path(), &["stats", "a"]);
    ok(&stats);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("num_users=12"));
}

#[test]
fn ingest_defaults_to_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    write_movielens(&dir.path().join("ratings.dat"));
    let out = Command::new(env!("CARGO_BIN_EXE_fedcl"))
        .current_dir(dir.path())
        .env("FEDCL_OUT", "elsewhere")
        .args(["ingest", "--format", "movielens", "ratings.dat"])
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("elsewhere/data/ratings/sequences.tsv").exists());
}

#[test]
fn missing_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedcl(dir.path(), &["ingest", "--format", "movielens", "absent.dat"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.dat"));
}

#[test]
fn train_writes_per_seed_logs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec!["train", "--seeds", "3", "--out", "runs"];
    args.extend_from_slice(FAST);
    ok(&fedcl(dir.path(), &args));

    let runs = dir.path().join("runs");
    for seed in 0..3 {
        let seed_dir = runs.join(format!("seed-{seed}"));
        let log = fs::read_to_string(seed_dir.join("metrics.jsonl")).unwrap();
        let header: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(header["seed"], seed);
        assert_eq!(header["config"]["federation"]["seed"], seed);
        assert_eq!(header["dataset_hash"].as_str().unwrap().len(), 64);
        assert_eq!(log.lines().count(), 1 + 6);
        assert!(seed_dir.join("checkpoint.fclk").exists());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(runs.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"], 3);
    assert!(summary["hr@10"]["mean"].as_f64().unwrap() <= 1.0);
    assert!(summary["hr@10"]["std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_runs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for out in ["x", "y"] {
        let mut args = vec!["train", "--out", out];
        args.extend_from_slice(FAST);
        ok(&fedcl(dir.path(), &args));
    }
    assert_eq!(
        fs::read(dir.path().join("x/seed-0/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("y/seed-0/metrics.jsonl")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("run.toml"), "[client]\nuse_semi_hard = true\n[model]\ndim = 4\n").unwrap();
    let mut args = vec!["train", "--config", "run.toml", "--out", "runs"];
    args.extend_from_slice(FAST);
    args.extend_from_slice(&["--client.use_semi_hard", "false"]);
    ok(&fedcl(dir.path(), &args));
    let log = fs::read_to_string(dir.path().join("runs/seed-0/metrics.jsonl")).unwrap();
    let header: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["client"]["use_semi_hard"], false);
    assert_eq!(header["config"]["model"]["dim"], 8);
}

#[test]
fn invalid_config_stops_before_training() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec!["train", "--out", "runs"];
    args.extend_from_slice(FAST);
    args.push("privacy.epsilon=0");
    let out = fedcl(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec!["sweep", "--key", "privacy.epsilon", "--values", "1,2,4,8", "--out", "sw"];
    args.extend_from_slice(FAST);
    ok(&fedcl(dir.path(), &args));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("value,hr@5_mean,hr@5_std,hr@10_mean"));
    let values: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(values, ["1", "2", "4", "8"]);
    assert!(dir.path().join("sw/privacy.epsilon=4/seed-0/metrics.jsonl").exists());
}

#[test]
fn sweep_unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec!["sweep", "--key", "privacy.budget", "--values", "1"];
    args.extend_from_slice(FAST);
    let out = fedcl(dir.path(), &args);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("privacy.budget") && err.contains("privacy.epsilon") && err.contains("cluster.count"));
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec!["train", "--out", "runs"];
    args.extend_from_slice(FAST);
    ok(&fedcl(dir.path(), &args));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/seed-0/report.json")).unwrap()).unwrap();

    let mut args = vec!["eval", "--checkpoint", "runs/seed-0/checkpoint.fclk"];
    args.extend_from_slice(FAST);
    let out = fedcl(dir.path(), &args);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let json: Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(json, report["test"]);
}

#[test]
fn keys_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedcl(dir.path(), &["keys"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("privacy.epsilon = 4.0\n"));
    assert!(text.contains("cluster.count = 25\n"));
}
