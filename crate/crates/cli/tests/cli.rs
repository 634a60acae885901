use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use ptsr::data::DatasetBundle;
use ptsr::model::ModelConfig;
use ptsr::train::{Checkpoint, TrainConfig, Trainer};

const REFERENCE_LOG_SHA256: &str = "f7cc70f57c89308db65f925f7111f201c3055a80c152d70b7a9323c24ff69adb";

fn ptsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptsr")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth_reference.json")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes a synthetic log and its prepared bundle into `dir`.
fn small_bundle(dir: &Path, users: usize, seed: u64) -> PathBuf {
    let config = dir.join(format!("synth{seed}.json"));
    fs::write(
        &config,
        format!(
            r#"{{"vocab_size": 120, "users": {users}, "min_len": 12, "max_len": 16,
               "random_rules": {{"counts": [5, 10], "probability": 0.9}}, "noise": 0.2, "seed": {seed}}}"#
        ),
    )
    .unwrap();
    let syn = dir.join(format!("syn{seed}"));
    let out = ptsr(&["synth", "--config", p(&config), "--out", p(&syn)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle = dir.join(format!("bundle{seed}.json"));
    let out = ptsr(&[
        "prepare", "--input", p(&syn.join("interactions.csv")), "--output", p(&bundle), "--max-len", "10", "--negatives", "20",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    bundle
}

fn train_small(bundle: &Path, out: &Path, epochs: &str) -> Output {
    ptsr(&["train", "--data", p(bundle), "--d", "8", "--levels", "2", "--batch", "32", "--epochs", epochs, "--lr", "5e-3", "--out", p(out)])
}

#[test]
fn synth_reference_dataset_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let out = ptsr(&["synth", "--config", p(&reference_config()), "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["interactions.csv", "keys.tsv", "relations.tsv", "rules.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let bytes = fs::read(dir.path().join("interactions.csv")).unwrap();
    assert_eq!(hex::encode(Sha256::digest(&bytes)), REFERENCE_LOG_SHA256);
    assert!(String::from_utf8_lossy(&out.stdout).contains(REFERENCE_LOG_SHA256));
}

#[test]
fn synth_usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = ptsr(&["synth", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--config"));

    let out = ptsr(&["synth", "--config", p(&dir.path().join("missing.json")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.json"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"vocab_size": 10, "users": 5, "min_len": 3, "max_len": 4, "noise": 1.5, "seed": 1}"#).unwrap();
    let out = ptsr(&["synth", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("noise"));

    // a regular file where the output directory should go
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "x").unwrap();
    let out = ptsr(&["synth", "--config", p(&reference_config()), "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn prepare_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let first = small_bundle(dir.path(), 150, 3);
    let again = dir.path().join("again.json");
    let input = dir.path().join("syn3/interactions.csv");
    let out = ptsr(&["prepare", "--input", p(&input), "--output", p(&again), "--max-len", "10", "--negatives", "20"]);
    assert_eq!(code(&out), 0);
    let (a, b) = (read_json(&first), read_json(&again));
    assert_eq!(a, b);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn prepare_rejects_missing_input_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let out = ptsr(&["prepare", "--input", p(&missing), "--output", p(&dir.path().join("b.json"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere.csv"));
}

#[test]
fn train_evaluate_explain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), 200, 4);
    let run = dir.path().join("run");
    let out = train_small(&bundle, &run, "2");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["best.ckpt", "last.ckpt", "run.jsonl", "run_config.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let events: Vec<Value> =
        fs::read_to_string(run.join("run.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kinds: Vec<&str> = events.iter().map(|e| e["event"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["start", "epoch", "epoch", "done"]);
    let hash = events[0]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(read_json(&run.join("run_config.json"))["config_hash"], hash.as_str());

    let report = dir.path().join("eval.json");
    let out = ptsr(&["evaluate", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&bundle), "--k", "5", "10", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&report);
    assert_eq!(report["config_hash"], hash.as_str());
    assert!(report["run_config"]["model"].is_object());
    assert!(report["seed"].is_u64());
    let metrics = report["metrics"].as_array().unwrap();
    let values: Vec<f64> = metrics.iter().flat_map(|m| [m["hr"].as_f64().unwrap(), m["ndcg"].as_f64().unwrap()]).collect();
    assert_eq!(values.len(), 4);
    assert_eq!(metrics.iter().map(|m| m["k"].as_u64().unwrap()).collect::<Vec<_>>(), [5, 10]);

    // explanation totals agree with the model's score of the same pair
    let exp = dir.path().join("exp");
    let relations = dir.path().join("syn4/relations.tsv");
    let out = ptsr(&[
        "explain", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&bundle), "--relations", p(&relations), "--k", "1", "5",
        "--out", p(&exp),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let state = Checkpoint::load(&run.join("best.ckpt")).unwrap();
    let model = state.model().unwrap();
    let data = DatasetBundle::load(&bundle).unwrap();
    let lines = fs::read_to_string(exp.join("explanations.jsonl")).unwrap();
    let mut count = 0;
    for line in lines.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let u = data.dataset.user_index(rec["user"].as_str().unwrap()).unwrap();
        let user = &data.dataset.users[u];
        assert_eq!(rec["target"].as_str().unwrap(), data.dataset.item_key(user.test).unwrap());
        let expected = model.score(user.test_input(data.dataset.max_len), user.test).unwrap();
        let total = rec["score"].as_f64().unwrap();
        assert!((total - expected).abs() <= 1e-9, "{total} vs {expected}");
        let summed: f64 = rec["levels"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|l| l["patterns"].as_array().unwrap().iter().map(|p| p["contribution"].as_f64().unwrap()))
            .sum();
        assert!((summed - expected).abs() <= 1e-9, "{summed} vs {expected}");
        count += 1;
    }
    assert_eq!(count, data.dataset.users.len());
    let explain_report = read_json(&exp.join("report.json"));
    let recall = explain_report["recall"].as_array().unwrap();
    assert_eq!(recall.len(), 2);
    assert!(recall.iter().all(|r| r["relation"] == "Planted"));

    // a single user
    let one = dir.path().join("one");
    let name = data.dataset.users[0].user.clone();
    let out = ptsr(&["explain", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&bundle), "--user", &name, "--out", p(&one)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(one.join("explanations.jsonl")).unwrap().lines().count(), 1);
    let out = ptsr(&["explain", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&bundle), "--user", "ghost", "--out", p(&one)]);
    assert_eq!(code(&out), 2);

    // resuming with different flags is refused
    let out = ptsr(&["train", "--data", p(&bundle), "--d", "16", "--batch", "32", "--epochs", "2", "--resume", "--out", p(&run)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_refuses_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_bundle(dir.path(), 150, 5);
    let b = small_bundle(dir.path(), 150, 6);
    let run = dir.path().join("run");
    assert_eq!(code(&train_small(&a, &run, "1")), 0);
    let out = ptsr(&["evaluate", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&b), "--out", p(&dir.path().join("e.json"))]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    let fa = DatasetBundle::load(&a).unwrap().fingerprint();
    let fb = DatasetBundle::load(&b).unwrap().fingerprint();
    assert!(msg.contains(&fa) && msg.contains(&fb), "{msg}");
}

#[test]
fn train_rejects_bad_settings() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), 150, 7);
    let out = ptsr(&["train", "--data", p(&bundle), "--levels", "11", "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = ptsr(&["train", "--data", p(&bundle), "--family", "normal", "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
    let out = ptsr(&["train", "--data", p(&dir.path().join("none.json")), "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), 150, 8);
    let run = dir.path().join("run");
    let out = ptsr(&["train", "--data", p(&bundle), "--d", "8", "--batch", "32", "--epochs", "3", "--lr", "1e300", "--out", p(&run)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let log = fs::read_to_string(run.join("run.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"error\""));
}

#[test]
fn untrained_model_scores_near_random() {
    // No item repeats within a user, so the held-out target is exchangeable with its negatives.
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.csv");
    let mut text = String::from("user,item,timestamp\n");
    for u in 0..2000usize {
        for j in 0..15usize {
            text.push_str(&format!("u{u},i{},{j}\n", (u * 7 + j * 13) % 300));
        }
    }
    fs::write(&input, text).unwrap();
    let bundle_path = dir.path().join("bundle.json");
    let out = ptsr(&["prepare", "--input", p(&input), "--output", p(&bundle_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle = DatasetBundle::load(&bundle_path).unwrap();
    let expected = 10.0 / 101.0;
    let mut hrs = Vec::new();
    for seed in 0..3 {
        let train = TrainConfig { init_seed: seed, ..TrainConfig::default() };
        let model = ModelConfig { dim: 16, ..ModelConfig::default() };
        let ckpt = dir.path().join(format!("init{seed}.ckpt"));
        Trainer::new(model, train, &bundle).unwrap().checkpoint().save(&ckpt).unwrap();
        let report = dir.path().join(format!("eval{seed}.json"));
        let out = ptsr(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&bundle_path), "--k", "10", "--out", p(&report)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        hrs.push(read_json(&report)["metrics"][0]["hr"].as_f64().unwrap());
    }
    let mean = hrs.iter().sum::<f64>() / hrs.len() as f64;
    assert!((mean - expected).abs() <= 0.02, "{hrs:?}");
}
