use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tttflow_core::config::RunConfig;
use tttflow_core::data::load_csv;
use tttflow_core::io_util::file_sha256;
use tttflow_core::{adapt, checkpoint};

const SMALL: &str = r#"
[data]
n_train = 600
n_test = 200

[train]
epochs = 3
schedule = { kind = "step", milestones = [2], factor = 10.0 }

[flow_train]
epochs = 2

[bench]
corruptions = ["gaussian_noise", "mean_shift"]
severities = [1, 5]
iterations = [0, 2]
seeds = [0, 1]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tttflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The single JSON error line a failing command leaves on stderr.
fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr is empty");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {last}"))
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

/// gen-data, train-source and train-flow under the small config.
fn trained(dir: &Path) {
    ok(dir, &["--config", "small.toml", "gen-data", "--out-dir", "data"]);
    ok(dir, &["--config", "small.toml", "train-source", "--data", "data/source_train.csv", "--out", "b0.ckpt"]);
    ok(
        dir,
        &[
            "--config", "small.toml", "train-flow", "--backbone", "b0.ckpt", "--data", "data/source_train.csv",
            "--out", "f.ckpt", "--out-backbone", "b.ckpt", "--history", "flow.csv",
        ],
    );
}

#[test]
fn print_config_shows_every_default_and_resolves_back() {
    let tmp = workspace();
    let out = ok(tmp.path(), &["--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for section in ["[data]", "[backbone]", "[flow]", "[train]", "[flow_train]", "[joint]", "[adapt]", "[bench]"] {
        assert!(text.contains(section), "missing {section}");
    }
    assert_eq!(RunConfig::resolve(&text, &[]).unwrap(), RunConfig::default());
    let out = ok(tmp.path(), &["--config", "small.toml", "--set", "adapt.lr=0.002", "--print-config"]);
    let cfg = RunConfig::resolve(&String::from_utf8(out.stdout).unwrap(), &[]).unwrap();
    assert_eq!(cfg.adapt.lr, 0.002);
    assert_eq!(cfg.data.n_train, 600);
}

#[test]
fn unknown_keys_are_all_reported_with_exit_code_one() {
    let tmp = workspace();
    std::fs::write(tmp.path().join("bad.toml"), "[adapt]\nlrr = 1\n[nope]\nx = 2\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.toml", "--set", "bench.typo=1", "--print-config"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    for key in ["adapt.lrr", "nope", "bench.typo"] {
        assert!(msg.contains(key), "{key} not in {msg}");
    }
}

#[test]
fn constraint_violations_are_listed_together() {
    let tmp = workspace();
    let out = run(tmp.path(), &["--set", "adapt.lr=-1", "--set", "data.classes=1", "--print-config"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = error_line(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("adapt.lr") && msg.contains("data.classes"), "{msg}");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = workspace();
    for args in [
        vec!["bench", "--out-dir", "x"],
        vec!["frobnicate"],
        vec!["train-source", "--data", "missing.csv", "--out", "b.ckpt"],
        vec!["--set", "no_equals_sign", "--print-config"],
        vec![],
    ] {
        let out = run(tmp.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(error_line(&out)["exit_code"], 1);
    }
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_inputs_exit_two_with_one_json_line() {
    let tmp = workspace();
    let d = tmp.path();
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    std::fs::write(d.join("bad.csv"), "label,f0\n1,0.5\nx,0.1\n").unwrap();
    let out = run(d, &["train-flow", "--backbone", "junk.ckpt", "--data", "bad.csv", "--out", "f.ckpt", "--out-backbone", "b.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "data");
    let out = run(d, &["--set", "flow_train.bn_stat_update=false", "train-source", "--data", "bad.csv", "--out", "b.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("line 3"));
    assert!(!d.join("b.ckpt").exists() && !d.join("f.ckpt").exists());
}

#[test]
fn train_flow_requires_somewhere_to_put_refreshed_statistics() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["--config", "small.toml", "gen-data", "--out-dir", "data"]);
    ok(d, &["--config", "small.toml", "train-source", "--data", "data/source_train.csv", "--out", "b0.ckpt"]);
    let out = run(d, &["--config", "small.toml", "train-flow", "--backbone", "b0.ckpt", "--data", "data/source_train.csv", "--out", "f.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_is_deterministic_and_leaves_inputs_untouched() {
    let tmp = workspace();
    let d = tmp.path();
    trained(d);
    let manifest: Value = serde_json::from_slice(&std::fs::read(d.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_object().unwrap().len(), 3 + 6 * 5);
    let before: Vec<String> = ["b0.ckpt", "data/source_train.csv"].iter().map(|p| file_sha256(&d.join(p)).unwrap()).collect();
    let first = file_sha256(&d.join("f.ckpt")).unwrap();
    let first_b = file_sha256(&d.join("b.ckpt")).unwrap();
    ok(
        d,
        &[
            "--config", "small.toml", "train-flow", "--backbone", "b0.ckpt", "--data", "data/source_train.csv",
            "--out", "f.ckpt", "--out-backbone", "b.ckpt",
        ],
    );
    assert_eq!(file_sha256(&d.join("f.ckpt")).unwrap(), first);
    assert_eq!(file_sha256(&d.join("b.ckpt")).unwrap(), first_b);
    let after: Vec<String> = ["b0.ckpt", "data/source_train.csv"].iter().map(|p| file_sha256(&d.join(p)).unwrap()).collect();
    assert_eq!(before, after);
    let history = std::fs::read_to_string(d.join("flow.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,split,loss");
}

#[test]
fn logs_are_json_lines_with_hashes() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["--config", "small.toml", "gen-data", "--out-dir", "data"]);
    let out = ok(d, &["--config", "small.toml", "train-source", "--data", "data/source_train.csv", "--out", "b0.ckpt"]);
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stderr).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let start = lines.iter().find(|l| l["event"] == "start").unwrap();
    assert_eq!(start["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(
        start["inputs_sha256"]["data/source_train.csv"],
        file_sha256(&d.join("data/source_train.csv")).unwrap()
    );
    assert!(out.stdout.is_empty());
}

#[test]
fn zero_iteration_adapt_eval_matches_direct_prediction() {
    let tmp = workspace();
    let d = tmp.path();
    trained(d);
    let out = ok(
        d,
        &[
            "--config", "small.toml", "--set", "adapt.iterations=0", "adapt-eval", "--backbone", "b.ckpt", "--flow",
            "f.ckpt", "--data", "data/source_gaussian_noise_s5_0.csv", "--batch-log", "batches.jsonl",
        ],
    );
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let ds = load_csv(&d.join("data/source_gaussian_noise_s5_0.csv")).unwrap();
    let b = checkpoint::load_backbone(&d.join("b.ckpt")).unwrap();
    let direct = adapt::accuracy(&b.predict(&ds.inputs).unwrap(), &ds.labels);
    assert_eq!(m["baseline_accuracy"].as_f64().unwrap(), direct);
    assert_eq!(m["adapted_accuracy"].as_f64().unwrap(), direct);
    let batches = std::fs::read_to_string(d.join("batches.jsonl")).unwrap();
    assert_eq!(batches.lines().count(), 2);
}

#[test]
fn bench_project_joint_and_ablation_write_their_reports() {
    let tmp = workspace();
    let d = tmp.path();
    trained(d);
    let out = ok(d, &["--config", "small.toml", "--jobs", "2", "bench", "--backbone", "b.ckpt", "--flow", "f.ckpt", "--out-dir", "bench", "--curve"]);
    let rows = std::fs::read_to_string(d.join("bench/bench_rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 2 * 2);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table, std::fs::read_to_string(d.join("bench/bench_table.txt")).unwrap());
    assert_eq!(table.lines().count(), 1 + 4);
    let curve = std::fs::read_to_string(d.join("bench/iteration_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 51);
    let meta: Value = serde_json::from_slice(&std::fs::read(d.join("bench/bench_metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["flow_sha256"], file_sha256(&d.join("f.ckpt")).unwrap());

    ok(
        d,
        &[
            "--config", "small.toml", "project", "--backbone", "b.ckpt", "--flow", "f.ckpt", "--data", "data/source_test.csv",
            "--data", "data/source_rotation_s5_0.csv", "--mode", "post", "--out", "proj.csv",
        ],
    );
    let proj = std::fs::read_to_string(d.join("proj.csv")).unwrap();
    assert_eq!(proj.lines().count(), 1 + 400);
    assert!(proj.lines().nth(400).unwrap().ends_with("source_rotation_s5_0"));

    ok(
        d,
        &[
            "--config", "small.toml", "train-joint", "--data", "data/source_train.csv", "--beta", "0.01",
            "--out-backbone", "jb.ckpt", "--out-flow", "jf.ckpt", "--history", "joint.csv",
        ],
    );
    let joint = std::fs::read_to_string(d.join("joint.csv")).unwrap();
    assert_eq!(joint.lines().count(), 1 + 3 * 3);

    let out = ok(d, &["--config", "small.toml", "ablation", "--out-dir", "abl"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("separate") && text.contains("beta = 0.001"));
    assert_eq!(std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap().lines().count(), 1 + 3);
}
