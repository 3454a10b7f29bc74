use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semobridge::datastore::{load_model, load_task};
use semobridge::tensor::{dot, norm};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_semobridge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SEMOBRIDGE_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "synth", "--out", d, "--classes", "3", "--shots", "2", "--queries", "20", "--validation", "5",
        "--embed-dim", "8", "--eos-dim", "12",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn tensor_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "semb" || e == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, &["--seed", "3", "--dtype", "f32"]);
    synth(&b, &["--seed", "3", "--dtype", "f32"]);
    synth(&c, &["--seed", "4", "--dtype", "f32"]);
    assert_eq!(tensor_files(&a), tensor_files(&b));
    assert_ne!(tensor_files(&a), tensor_files(&c));
}

#[test]
fn seed_can_come_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &["--seed", "21"]);
    let out = Command::new(BIN)
        .args(["synth", "--out", p(&b), "--classes", "3", "--shots", "2", "--queries", "20", "--validation", "5"])
        .args(["--embed-dim", "8", "--eos-dim", "12"])
        .env("SEMOBRIDGE_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(tensor_files(&a), tensor_files(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", p(tmp.path()), "--classes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--task", "x"]).status.code(), Some(2));
}

#[test]
fn missing_task_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["infer", "--task", p(&tmp.path().join("nope")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("datastore: missing file"), "{err}");
}

#[test]
fn zero_shot_blend_matches_direct_cosine_argmax() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    synth(&task_dir, &["--seed", "8", "--gap", "1.2"]);
    let m = ok(&["infer", "--task", p(&task_dir), "--blend", "l1=1,l2=0,l3=0", "--out", p(tmp.path())]);

    let task = load_task(&task_dir).unwrap();
    let mut correct = 0;
    for (q, &label) in task.test.embeddings.row_iter().zip(&task.test.labels) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, t) in task.text.row_iter().enumerate() {
            let cos = dot(q, t) / (norm(q) * norm(t));
            if cos > best.0 {
                best = (cos, c);
            }
        }
        correct += usize::from(best.1 == label);
    }
    let expected = correct as f64 / task.test.len() as f64;
    assert_eq!(m["accuracy"].as_f64().unwrap(), expected);
    for name in ["confusion.csv", "similarity_hist_intra_modal.csv", "similarity_hist_cross_modal.csv", "similarity_hist_bridged.csv"] {
        assert!(tmp.path().join(name).is_file(), "{name}");
    }
    let confusion = fs::read_to_string(tmp.path().join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 1 + task.classes() * task.classes());
}

#[test]
fn zero_epoch_training_keeps_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    let model_dir = tmp.path().join("model");
    synth(&task_dir, &["--seed", "2"]);
    let m = ok(&["train", "--task", p(&task_dir), "--epochs", "0", "--out", p(&model_dir)]);
    assert_eq!(m["best_epoch"], 0);

    let task = load_task(&task_dir).unwrap();
    let model = load_model(&model_dir, None).unwrap().model;
    assert_eq!(model.inverse_projection, task.projection.inverse);
    assert!(model.class_bias.data().iter().all(|&v| v == 0.0));
    let history = fs::read_to_string(model_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let csv = tmp.path().join("norms.csv");
    let e = ok(&[
        "export", "--task", p(&task_dir), "--model", p(&model_dir), "--what", "bias-norms", "--out", p(&csv),
    ]);
    assert_eq!(e["rows"], 3);
    assert!(e["bias_norms"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn trained_model_moves_and_is_reusable() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    let model_dir = tmp.path().join("model");
    synth(&task_dir, &["--seed", "5"]);
    let m = ok(&["train", "--task", p(&task_dir), "--epochs", "30", "--eval-interval", "10", "--out", p(&model_dir)]);
    assert!(m["final_loss"].as_f64().unwrap() < m["initial_loss"].as_f64().unwrap());
    let model = load_model(&model_dir, None).unwrap();
    assert_eq!(model.training.unwrap().config.epochs, 30);

    let e = ok(&["eval", "--task", p(&task_dir), "--model", p(&model_dir), "--split", "validation"]);
    for k in ["z1", "z2", "z3", "z2+z3", "blend"] {
        let acc = e["by_logit"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{k}");
    }
    assert_eq!(e["by_logit"]["blend"], e["accuracy"]);
}

#[test]
fn model_for_different_task_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    let model_dir = tmp.path().join("model");
    synth(&task_dir, &["--seed", "5"]);
    ok(&["train", "--task", p(&task_dir), "--epochs", "0", "--out", p(&model_dir)]);
    synth(&task_dir, &["--seed", "6"]);
    let out = run(&["infer", "--task", p(&task_dir), "--model", p(&model_dir), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest hash mismatch"));
}

#[test]
fn hpsearch_respects_budget_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    synth(&task_dir, &["--seed", "1"]);
    let out = tmp.path().join("search");
    let m = ok(&["hpsearch", "--task", p(&task_dir), "--budget", "1", "--out", p(&out)]);
    assert_eq!(m["evaluations"], 1);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);

    let m = ok(&["hpsearch", "--task", p(&task_dir), "--budget", "40", "--strategy", "random", "--out", p(&out)]);
    assert_eq!(m["evaluations"], 40);
    let blend = out.join("blend.json");
    let i = ok(&["infer", "--task", p(&task_dir), "--blend", p(&blend), "--out", p(&out)]);
    assert!(i["accuracy"].as_f64().is_some());
}

#[test]
fn empty_validation_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    ok(&[
        "synth", "--out", p(&task_dir), "--classes", "3", "--shots", "2", "--queries", "10", "--validation", "0",
        "--embed-dim", "8", "--eos-dim", "12",
    ]);
    let out = run(&["hpsearch", "--task", p(&task_dir), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation split is empty"));
    let out = run(&["train", "--task", p(&task_dir), "--epochs", "1", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runs_are_appended_to_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    synth(&task_dir, &["--seed", "1"]);
    let out = tmp.path().join("out");
    ok(&["infer", "--task", p(&task_dir), "--out", p(&out)]);
    ok(&["--threads", "2", "infer", "--task", p(&task_dir), "--out", p(&out)]);
    let log = fs::read_to_string(out.join("runs.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["command"], "infer");
    assert_eq!(lines[1]["config"]["threads"], 2);
    assert!(lines[0]["wall_time_s"].as_f64().unwrap() >= 0.0);

    let custom = tmp.path().join("log.jsonl");
    ok(&["--report", p(&custom), "eval", "--task", p(&task_dir)]);
    assert_eq!(fs::read_to_string(&custom).unwrap().lines().count(), 1);
}

#[test]
fn similarity_histograms_export_with_overlaps() {
    let tmp = tempfile::tempdir().unwrap();
    let task_dir = tmp.path().join("task");
    synth(&task_dir, &["--seed", "1"]);
    let out = tmp.path().join("hist");
    let m = ok(&["export", "--task", p(&task_dir), "--what", "similarity-hist", "--out", p(&out)]);
    for k in ["intra_modal", "cross_modal", "bridged"] {
        let o = m["overlap"][k].as_f64().unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&o));
        let csv = fs::read_to_string(out.join(format!("similarity_hist_{k}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 101);
    }
}

#[test]
fn zero_threads_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["--threads", "0", "synth", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn bias_norms(task: &Path, model: &Path, csv: &Path) -> Vec<f64> {
    let m = ok(&["export", "--task", p(task), "--model", p(model), "--what", "bias-norms", "--out", p(csv)]);
    m["bias_norms"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
}

#[test]
fn default_training_and_bias_ablation_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let task = tmp.path().join("task");
    ok(&["synth", "--out", p(&task), "--seed", "1"]);

    let best = tmp.path().join("best");
    let m = ok(&["train", "--task", p(&task), "--out", p(&best)]);
    assert!(best.join("model.json").is_file());
    let history = fs::read_to_string(best.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 5001);
    assert_eq!(m["saved_epoch"], m["best_epoch"]);

    let (off, on) = (tmp.path().join("off"), tmp.path().join("on"));
    ok(&["train", "--task", p(&task), "--lambda-b", "0", "--keep", "final", "--out", p(&off)]);
    let m = ok(&["train", "--task", p(&task), "--lambda-b", "0.1", "--keep", "final", "--out", p(&on)]);
    assert_eq!(m["saved_epoch"], 5000);
    let s_off = std_dev(&bias_norms(&task, &off, &tmp.path().join("off.csv")));
    let s_on = std_dev(&bias_norms(&task, &on, &tmp.path().join("on.csv")));
    assert!(s_on < s_off, "regularized std {s_on} vs unregularized {s_off}");
}

#[test]
fn searched_blend_beats_intra_modal_centroids() {
    let tmp = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let dir = tmp.path().join(format!("s{seed}"));
        let task_dir = dir.join("task");
        ok(&["synth", "--out", p(&task_dir), "--seed", &seed.to_string()]);
        ok(&["hpsearch", "--task", p(&task_dir), "--seed", &seed.to_string(), "--out", p(&dir)]);
        let blend = semobridge::datastore::read_blend(&dir.join("blend.json")).unwrap();
        let m = ok(&["infer", "--task", p(&task_dir), "--blend", p(&dir.join("blend.json")), "--out", p(&dir)]);
        let acc = m["accuracy"].as_f64().unwrap();

        let task = load_task(&task_dir).unwrap();
        let centroids = semobridge::synth::oracle::class_means(&task.support.embeddings, &task.support.labels, task.classes());
        let nc = semobridge::synth::oracle::nearest_centroid(&task.test.embeddings, &centroids, &task.test.labels).unwrap();
        let uses_z1_z3 = blend.lambda1 > 0.0 && blend.lambda3 > 0.0;
        wins += usize::from(acc > nc && uses_z1_z3);
        detail.push(format!("{acc:.3}/{nc:.3}/{uses_z1_z3}"));
    }
    assert!(wins > 5, "strict wins {wins}/10: {detail:?}");
}
