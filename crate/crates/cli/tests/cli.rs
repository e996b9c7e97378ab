use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SPEC: &str = "\
train = 24
val = 10
test = 10
d_text = 3
d_audio = 2
d_vision = 2
min_len_text = 3
max_len_text = 4
min_len_audio = 4
max_len_audio = 5
min_len_vision = 3
max_len_vision = 6
";

const CONFIG: &str = "\
train_data = \"data/train.jsonl\"
val_data = \"data/val.jsonl\"
test_data = \"data/test.jsonl\"
d_text = 3
d_audio = 2
d_vision = 2
max_len_text = 4
max_len_audio = 5
max_len_vision = 6
d_h = 4
depth = 1
ffn_hidden = 8
d_c = 4
nodes = 3
epochs = 2
batch_size = 8
seed = 5
";

fn graphcage(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_graphcage"));
    cmd.args(args).env_remove("GRAPHCAGE_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A directory holding `data/` and `config.toml`.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.path().join("data");
    ok(graphcage(
        &["gen-synth", "--spec", s(&spec), "--seed", "3", "--out", s(&data)],
        &[],
    ));
    let config = dir.path().join("config.toml");
    fs::write(&config, CONFIG).unwrap();
    (dir, config)
}

#[test]
fn gen_synth_reports_counts_and_is_reproducible() {
    let (dir, _) = workspace();
    let spec = dir.path().join("spec.toml");
    let again = dir.path().join("again");
    let report = ok(graphcage(
        &["gen-synth", "--spec", s(&spec), "--seed", "3", "--out", s(&again)],
        &[],
    ));
    assert_eq!(report["train"], 24);
    assert_eq!(report["test"], 10);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("data").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap()
        );
    }
}

#[test]
fn train_eval_and_inspect() {
    let (dir, config) = workspace();
    let run = dir.path().join("run");
    let report = ok(graphcage(&["train", "--config", s(&config), "--out", s(&run)], &[]));
    assert_eq!(report["strategy"], "capsule");
    assert_eq!(report["seed"], 5);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let ckpt = run.join("best.ckpt");
    let test = dir.path().join("data/test.jsonl");
    let metrics = ok(graphcage(
        &["eval", "--ckpt", s(&ckpt), "--data", s(&test), "--json"],
        &[],
    ));
    assert_eq!(metrics, report["test"]);
    for key in ["acc7", "acc2", "f1", "mae", "corr"] {
        assert!(metrics[key].is_f64(), "{key}");
    }

    let example = dir.path().join("one.jsonl");
    let first = fs::read_to_string(&test).unwrap().lines().next().unwrap().to_owned();
    fs::write(&example, first + "\n").unwrap();
    let traces = dir.path().join("traces");
    let summary = ok(graphcage(
        &[
            "inspect-routing",
            "--ckpt",
            s(&ckpt),
            "--example",
            s(&example),
            "--out",
            s(&traces),
            "--ascii-heatmap",
        ],
        &[],
    ));
    assert_eq!(summary["construction"].as_array().unwrap().len(), 3);
    assert_eq!(summary["files"].as_array().unwrap().len(), 18);
    assert!(traces.join("construction_vision.json").exists());
    assert!(traces.join("heatmap_aggregation_text_k2.txt").exists());
    assert!(traces.join("summary.json").exists());

    // Two examples are refused.
    let err = graphcage(
        &["inspect-routing", "--ckpt", s(&ckpt), "--example", s(&test), "--out", s(&traces)],
        &[],
    );
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("exactly one example"));
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let (dir, config) = workspace();
    let a = ok(graphcage(
        &["train", "--config", s(&config), "--out", s(&dir.path().join("a"))],
        &[("GRAPHCAGE_SEED", "11")],
    ));
    assert_eq!(a["seed"], 11);
    let bad = graphcage(
        &["train", "--config", s(&config), "--out", s(&dir.path().join("b"))],
        &[("GRAPHCAGE_SEED", "eleven")],
    );
    assert!(!bad.status.success());
}

#[test]
fn ablate_emits_one_row_per_strategy() {
    let (dir, config) = workspace();
    let out = dir.path().join("ablation");
    let table = ok(graphcage(
        &[
            "ablate",
            "--config",
            s(&config),
            "--strategies",
            "mean,no-caps",
            "--out",
            s(&out),
        ],
        &[],
    ));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["strategy"], "mean");
    assert_eq!(rows[1]["strategy"], "no-caps");
    for r in rows {
        assert_eq!(r["split"], "test");
        for key in ["acc7", "acc2", "f1", "mae", "corr"] {
            assert!(r["metrics"][key].is_f64());
        }
    }
    assert!(out.join("table.json").exists());
    assert!(out.join("mean/best.ckpt").exists());

    let one = ok(graphcage(
        &["ablate", "--config", s(&config), "--strategies", "attention"],
        &[],
    ));
    assert_eq!(one["rows"].as_array().unwrap().len(), 1);
    assert!(!graphcage(&["ablate", "--config", s(&config), "--strategies", ","], &[])
        .status
        .success());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let (dir, config) = workspace();
    let missing = graphcage(&["train", "--config", "/nonexistent/config.toml", "--out", "x"], &[]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));

    let run = dir.path().join("run");
    ok(graphcage(&["train", "--config", s(&config), "--out", s(&run)], &[]));
    let wrong = dir.path().join("wrong.jsonl");
    fs::write(&wrong, "{\"text\":[[1,2]],\"audio\":[[1,2]],\"vision\":[[1,2]],\"label\":0.5}\n").unwrap();
    let out = graphcage(
        &["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&wrong), "--json"],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimensions"));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let test = dir.path().join("data/test.jsonl");
    assert!(!graphcage(&["eval", "--ckpt", s(&garbage), "--data", s(&test), "--json"], &[])
        .status
        .success());
}
