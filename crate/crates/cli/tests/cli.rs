//! Drives the `fidel` binary end to end on small rendered corpora.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn fidel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fidel"))
        .args(args)
        .env_remove("FIDEL_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run fidel")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One 50-class corpus shared by every test in this binary.
fn corpus() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = fidel(&["synth", "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        dir
    })
    .path()
}

fn data_args() -> Vec<String> {
    vec![
        "--data-root".into(),
        corpus().display().to_string(),
        "--schema".into(),
        "inferred".into(),
        "--backbone".into(),
        "conv4".into(),
    ]
}

fn with_data(base: &[&str], extra: &[&str]) -> Output {
    let mut args: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    args.extend(data_args());
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    fidel(&refs)
}

#[test]
fn validate_data_reports_counts() {
    let out = fidel(&[
        "validate-data",
        "--data-root",
        corpus().to_str().unwrap(),
        "--schema",
        "inferred",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("250 images, 50 classes"));
}

#[test]
fn full_alphabet_corpus_validates() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    assert!(fidel(&["synth", "--amharic", "--out", root])
        .status
        .success());
    let out = fidel(&["validate-data", "--data-root", root]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("1325 images, 265 classes"));

    fs::copy(dir.path().join("3/0.png"), dir.path().join("200/4.png")).unwrap();
    let out = fidel(&["validate-data", "--data-root", root]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("duplicate_image"));
}

#[test]
fn manifest_problems_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus().to_str().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = fidel(&[
        "validate-data",
        "--data-root",
        root,
        "--manifest",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    let mut text = fs::read_to_string(corpus().join("manifest.csv")).unwrap();
    text = text.replacen("\n3,1,3,train", "\n3,1,x,train", 1);
    fs::write(&bad, text).unwrap();
    let out = fidel(&[
        "validate-data",
        "--data-root",
        root,
        "--manifest",
        bad.to_str().unwrap(),
        "--schema",
        "inferred",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn missing_data_root_is_usage_error() {
    let out = fidel(&["validate-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("FIDEL_DATA_ROOT"));
}

#[test]
fn data_root_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_fidel"))
        .args(["validate-data", "--schema", "inferred"])
        .env("FIDEL_DATA_ROOT", corpus())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}

fn dump(extra: &[&str]) -> Value {
    let out = with_data(&["sample-episodes"], extra);
    assert!(out.status.success(), "{}", stderr(&out));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn sample_episodes_follow_the_plan() {
    let d = dump(&["--method", "method1", "--n", "1"]);
    let grans: Vec<&str> = d["episodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["granularity"].as_str().unwrap())
        .collect();
    assert_eq!(grans, ["character", "row"]);
    let row_ep = &d["episodes"][1];
    assert_eq!(row_ep["support"].as_array().unwrap().len(), 5);
    for item in row_ep["query"].as_array().unwrap() {
        let k = item["local_class"].as_u64().unwrap() as usize;
        assert_eq!(item["row_label"], row_ep["class_identities"][k]);
    }

    let d = dump(&["--method", "baseline", "--n", "3", "--shot", "2"]);
    assert_eq!(d["episodes"].as_array().unwrap().len(), 3);
    assert_eq!(d["episodes"][0]["support"].as_array().unwrap().len(), 10);
}

#[test]
fn sample_episodes_deterministic_and_empty() {
    let a = dump(&["--method", "method2", "--n", "2", "--seed", "5"]);
    let b = dump(&["--method", "method2", "--n", "2", "--seed", "5"]);
    assert_eq!(a, b);
    let c = dump(&["--method", "method2", "--n", "2", "--seed", "6"]);
    assert_ne!(a, c);
    let empty = dump(&["--method", "method1", "--n", "0"]);
    assert_eq!(empty["episodes"].as_array().unwrap().len(), 0);
}

#[test]
fn invalid_spec_is_usage_error() {
    let out = with_data(&["sample-episodes"], &["--way", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        "[train]\ntotal_episodes = 50\nvalidation_every = 2\nvalidation_tasks = 3\nshot = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = with_data(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        &["--total-episodes", "4", "--method", "method2"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for f in [
        "config.json",
        "history.csv",
        "schedule.csv",
        "val.csv",
        "best.ckpt",
        "final.ckpt",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echoed: Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["total_episodes"], 4);
    assert_eq!(echoed["train"]["shot"], 2);
    assert_eq!(echoed["train"]["method"], "method2");
    assert_eq!(
        fs::read_to_string(run.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let ckpt = run.join("best.ckpt");
    let out = with_data(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--json",
            "--tasks",
            "5",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_tasks"], 5);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = fidel(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-root",
        corpus().to_str().unwrap(),
        "--schema",
        "inferred",
        "--backbone",
        "resnet18",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("resnet18"));
}

#[test]
fn bad_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "[train]\nnot_a_key = 1\n").unwrap();
    let out = with_data(
        &["train", "--config", cfg.to_str().unwrap(), "--out", "x"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = with_data(&["train", "--out", "x"], &["--total-episodes", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reproduce_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("repro");
    let out = with_data(
        &["reproduce", "--out", out_dir.to_str().unwrap()],
        &[
            "--methods",
            "baseline,method1",
            "--shots",
            "1",
            "--total-episodes",
            "2",
            "--validation-every",
            "2",
            "--validation-tasks",
            "2",
            "--test-tasks",
            "3",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for f in [
        "results.csv",
        "table.md",
        "table.csv",
        "findings.json",
        "config.json",
    ] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 3);
    let table = fs::read_to_string(out_dir.join("table.md")).unwrap();
    assert!(table.contains("—"));
    assert!(stdout(&out).contains("| Baseline |"));
}
