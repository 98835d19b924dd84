//! End-to-end checks of the `dqroute` binary contracts.

use std::path::Path;
use std::process::{Command, Output};

fn dqroute() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dqroute"))
}

fn tiny_config_json() -> &'static str {
    r#"{
  "dataset": {
    "num_classes": 4, "imbalance_ratio": 30.0, "max_count": 150,
    "feature_dim": 4, "tau_m": 100, "tau_t": 20,
    "overlap": 0.0, "hard_classes": [],
    "probe_per_class": 4, "test_per_class": 6, "seed": 1
  },
  "model": { "hidden_dim": 8 },
  "optimizer": { "epochs": 2, "batch_size": 32 },
  "enable_difficulty": true,
  "enable_moe": true
}"#
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, tiny_config_json()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn dqroute");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_writes_the_four_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run_ok(dqroute().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    for name in [
        "config.json",
        "metrics.csv",
        "class_stats.csv",
        "model.json",
    ] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
}

#[test]
fn invalid_config_fails_with_itemized_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"dataset": {"num_classes": 1}, "optimizer": {"batch_size": 0}}"#,
    )
    .unwrap();
    let out = dqroute()
        .args([
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("num_classes"), "stderr: {stderr}");
    assert!(stderr.contains("batch_size"), "stderr: {stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dqroute()
        .args(["train", "--bogus-flag", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn invalid_log_level_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out = dqroute()
        .env("DQROUTE_LOG", "loud")
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("r").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DQROUTE_LOG"));
}

#[test]
fn quiet_mode_silences_stdout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out = run_ok(dqroute().env("DQROUTE_LOG", "quiet").args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]));
    assert!(out.stdout.is_empty());
}

#[test]
fn config_echo_reruns_to_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let first = tmp.path().join("first");
    run_ok(dqroute().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
    ]));
    // rerun from the echoed config
    let second = tmp.path().join("second");
    run_ok(dqroute().args([
        "train",
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]));
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(second.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "echoed config must reproduce byte-identical metrics");
}

#[test]
fn gen_data_round_trips_through_load_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("data.csv");
    run_ok(dqroute().args([
        "gen-data",
        "--C",
        "5",
        "--IR",
        "10",
        "--Nmax",
        "40",
        "--d",
        "4",
        "--seed",
        "7",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let ds = dqroute_core::datagen::load_csv(&csv, Some(5)).unwrap();
    let spec = dqroute_core::datagen::LongTailSpec::new(5, 10.0, 40, 100, 20).unwrap();
    assert_eq!(ds.class_counts(), spec.counts);
    assert_eq!(ds.feature_dim, 4);
}

#[test]
fn eval_reports_accuracy_for_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run_ok(dqroute().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let csv = tmp.path().join("eval.csv");
    run_ok(dqroute().args([
        "gen-data",
        "--C",
        "4",
        "--IR",
        "30",
        "--Nmax",
        "150",
        "--d",
        "4",
        "--seed",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let out = run_ok(dqroute().args([
        "eval",
        "--model",
        run_dir.join("model.json").to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--spec",
        run_dir.join("config.json").to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("acc_all="), "stdout: {stdout}");
}

#[test]
fn eval_rejects_mismatched_model_and_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run_ok(dqroute().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    // a spec with a different class count
    let other = tmp.path().join("other.json");
    std::fs::write(
        &other,
        tiny_config_json().replace("\"num_classes\": 4", "\"num_classes\": 6"),
    )
    .unwrap();
    let csv = tmp.path().join("eval.csv");
    run_ok(dqroute().args([
        "gen-data",
        "--C",
        "4",
        "--IR",
        "30",
        "--Nmax",
        "150",
        "--d",
        "4",
        "--seed",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let out = dqroute()
        .args([
            "eval",
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--data",
            csv.to_str().unwrap(),
            "--spec",
            other.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn ablate_modules_produces_twelve_runs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    run_ok(dqroute().env("DQROUTE_LOG", "quiet").args([
        "ablate",
        "--plan",
        "modules",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1,2,3",
        "--jobs",
        "4",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let mut run_dirs = 0;
    for cell in ["baseline", "ood_only", "difficulty_only", "full"] {
        for seed in [1, 2, 3] {
            let dir = out_dir.join(format!("{cell}_s{seed}"));
            assert!(dir.join("metrics.csv").exists(), "missing {dir:?}");
            run_dirs += 1;
        }
    }
    assert_eq!(run_dirs, 12);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 5, "header + one row per cell: {summary}");
    assert!(lines[0].starts_with("cell,seeds,acc_all_mean"));
    for cell in ["baseline", "ood_only", "difficulty_only", "full"] {
        assert!(summary.contains(&format!("{cell},3,")), "{summary}");
    }
}

#[test]
fn ablate_accepts_the_ood_loss_plan_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    run_ok(dqroute().env("DQROUTE_LOG", "quiet").args([
        "ablate",
        "--plan",
        "ood_loss",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    for cell in ["bce", "entropy", "focal", "margin"] {
        assert!(summary.contains(&format!("{cell},1,")), "{summary}");
    }
}

#[test]
fn ablate_seed_configs_differ_only_in_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    run_ok(dqroute().env("DQROUTE_LOG", "quiet").args([
        "ablate",
        "--plan",
        "ratio",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1",
        "--jobs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    // every cell echoes a config that differs from its siblings only in the
    // swept field
    let mut normalized: Vec<serde_json::Value> = Vec::new();
    for alpha in ["0.00", "0.25", "0.50", "0.75", "1.00"] {
        let echoed = std::fs::read_to_string(
            out_dir
                .join(format!("alpha-{alpha}_s1"))
                .join("config.json"),
        )
        .unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&echoed).unwrap();
        assert_eq!(
            value["difficulty"]["alpha"].as_f64().unwrap(),
            alpha.parse::<f64>().unwrap()
        );
        value["difficulty"]["alpha"] = serde_json::Value::Null;
        normalized.push(value);
    }
    for value in &normalized[1..] {
        assert_eq!(value, &normalized[0]);
    }
}
