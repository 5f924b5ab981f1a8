use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gmoe::datasets::Dataset;

fn gmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmoe")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn small_data(dir: &Path) -> String {
    let out = dir.join("data");
    let o = gmoe(&["gen-data", "--out", out.to_str().unwrap(), "--set", "gen.graphs=40", "--set", "split=0.6,0.2,0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("dataset.jsonl").to_str().unwrap().to_string()
}

const QUICK: [&str; 4] = ["--set", "epochs=3", "--set", "hidden=8"];

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path());
    let first = read(&a);
    let again = small_data(dir.path());
    assert_eq!(first, read(again));
    let ds = Dataset::load_jsonl(&a, None).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.to_jsonl(), first);
    assert!(read(dir.path().join("data/config.txt")).contains("gen.graphs=40\n"));
}

#[test]
fn invalid_split_ratio_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = gmoe(&["gen-data", "--out", dir.path().to_str().unwrap(), "--set", "split=0.5,0.6,0.1"]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&gmoe(&["frobnicate"])), 1);
    assert_eq!(code(&gmoe(&["train"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = gmoe(&["train", "--out", dir.path().to_str().unwrap(), "--set", "bogus=1"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&gmoe(&["--help"])), 0);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = gmoe(&["train", "--out", dir.path().to_str().unwrap(), "--dataset", "/nonexistent/data.jsonl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_reruns_are_byte_identical_and_feed_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", out.to_str().unwrap(), "--dataset", &data, "--set", "seed=3"];
        args.extend(QUICK);
        let o = gmoe(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["history.csv", "model.ckpt", "gate_stats.csv", "summary.json"] {
        assert_eq!(read(a.join(file)), read(b.join(file)), "{file}");
    }
    let history = read(a.join("history.csv"));
    assert!(history.starts_with("epoch,task_loss,importance_loss,load_loss,total_loss,valid_metric,test_metric\n"));
    assert_eq!(history.lines().count(), 5);
    let config = read(a.join("config.txt"));
    assert!(config.contains("seed=3\n") && config.contains("epochs=3\n"));
    assert!(read(a.join("gate_stats.csv")).starts_with("layer,expert,importance,load,count\n"));

    let ckpt = a.join("model.ckpt");
    let ev = dir.path().join("eval");
    let o = gmoe(&["eval", "--out", ev.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--dataset", &data]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(ev.join("eval.json"))).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["metric"], "roc_auc");
    let summary: serde_json::Value = serde_json::from_str(&read(a.join("summary.json"))).unwrap();
    assert_eq!(report["value"], summary["best_test"]);

    let gs = dir.path().join("gs");
    let o = gmoe(&[
        "gate-stats",
        "--out",
        gs.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        &data,
        "--set",
        "eval.split=all",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(gs.join("gate_stats.csv")), read(a.join("gate_stats.csv")));
}

fn history_rows(path: &Path) -> Vec<Vec<f64>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn baseline_flag_reproduces_the_plain_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let train = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", out.to_str().unwrap(), "--dataset", &data];
        args.extend(QUICK);
        args.extend(extra);
        assert_eq!(code(&gmoe(&args)), 0);
        history_rows(&out.join("history.csv"))
    };
    let single = train("single", &["--baseline"]);
    let plain = train("plain", &["--set", "moe=false"]);
    assert_eq!(single.len(), plain.len());
    for (a, b) in single.iter().zip(&plain) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-8, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn grid_writes_one_row_per_cell_in_either_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let grid = |name: &str, parallel: bool| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train",
            "--grid",
            "--out",
            out.to_str().unwrap(),
            "--dataset",
            &data,
            "--set",
            "grid.n=4",
            "--set",
            "grid.k=1",
            "--set",
            "grid.lambda=0.1,1",
        ];
        args.extend(QUICK);
        if parallel {
            args.push("--parallel");
        }
        let o = gmoe(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("best cell "));
        read(out.join("grid.csv"))
    };
    let sequential = grid("seq", false);
    let lines: Vec<&str> = sequential.lines().collect();
    assert_eq!(lines[0], "n,m,k,lambda,width,best_epoch,best_valid,best_test");
    // m in {0, 2, 4}, two lambdas.
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("4,0,1,0.1,") && lines[2].starts_with("4,0,1,1,"));
    assert_eq!(sequential, grid("par", true));
}

#[test]
fn flops_reports_parity_and_matching_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops");
    let o = gmoe(&["flops", "--out", out.to_str().unwrap(), "--set", "hidden=64", "--set", "n=1", "--set", "m=1", "--set", "k=1"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("parity_ratio=1.0000"));
    let checks: serde_json::Value = serde_json::from_str(&read(out.join("flops.json"))).unwrap();
    assert_eq!(checks[0]["report"]["instrumented_match"], true);
    assert_eq!(checks[0]["report"]["parity_ratio"], 1.0);

    let o = gmoe(&["flops", "--grid", "--out", out.to_str().unwrap(), "--set", "hidden=64"]);
    assert_eq!(code(&o), 0);
    let checks: serde_json::Value = serde_json::from_str(&read(out.join("flops.json"))).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 18);
}

#[test]
fn gradcheck_passes_by_default_and_fails_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = gmoe(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let first = read(out.join("gradcheck.csv"));
    assert_eq!(first.lines().count(), 6);
    assert!(first.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(code(&gmoe(&["gradcheck", "--out", out.to_str().unwrap()])), 0);
    assert_eq!(read(out.join("gradcheck.csv")), first);

    let o = gmoe(&["gradcheck", "--out", out.to_str().unwrap(), "--set", "gradcheck.tolerance=1e-300"]);
    assert_eq!(code(&o), 2);
}
