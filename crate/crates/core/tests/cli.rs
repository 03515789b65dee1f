use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use par_core::corpus::write_corpus;
use par_core::synth::{random_corpus, SynthConfig};
use par_core::trainer::EpochRecord;
use tempfile::TempDir;

fn par(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_par")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = par(args);
    assert!(out.status.success(), "par {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sample() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_corpus.jsonl").to_string()
}

fn sample_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_config.json").to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn generate_sample(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("inst.jsonl");
    ok(&["generate", &sample(), "--out", &s(&out)]);
    out
}

fn read_log(run: &Path) -> Vec<EpochRecord> {
    fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&par(&["--help"])), 0);
    assert_eq!(code(&par(&["--version"])), 0);
    assert_eq!(code(&par(&["frobnicate"])), 1);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = par(&["generate", "/nonexistent/corpus.jsonl", "--out", &s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn invalid_corpus_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    let first = fs::read_to_string(sample()).unwrap().lines().next().unwrap().to_string();
    fs::write(&corpus, format!("{first}\n{{\"doc_id\": 5}}\n")).unwrap();
    let out = par(&["generate", &s(&corpus), "--out", &s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn bad_config_fails_before_any_checkpoint() {
    let dir = TempDir::new().unwrap();
    let inst = generate_sample(&dir);
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"model": {"dropout_rate": 1.5}}"#).unwrap();
    let run = dir.path().join("run");
    let out = par(&["train", &s(&inst), "--out", &s(&run), "--config", &s(&config)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!run.exists());

    fs::write(&config, r#"{"model": {"hiden_dim": 4}}"#).unwrap();
    let out = par(&["train", &s(&inst), "--out", &s(&run), "--config", &s(&config)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!run.exists());
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let inst = generate_sample(&dir);
    let run = dir.path().join("run");
    ok(&["train", &s(&inst), "--out", &s(&run), "--config", &sample_config(), "--epochs", "0"]);
    assert!(run.join("ckpt-000/params.bin").exists());
    assert!(!run.join("ckpt-001").exists());
    assert!(read_log(&run).is_empty());
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let inst = generate_sample(&dir);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    ok(&["train", &s(&inst), "--out", &s(&full), "--config", &sample_config(), "--epochs", "3"]);
    ok(&["train", &s(&inst), "--out", &s(&split), "--config", &sample_config(), "--epochs", "1"]);
    ok(&[
        "train",
        &s(&inst),
        "--out",
        &s(&split),
        "--resume",
        &s(&split.join("ckpt-001")),
        "--epochs",
        "3",
    ]);
    assert_eq!(read_log(&full), read_log(&split));
    for f in ["params.bin", "adagrad.bin"] {
        assert_eq!(
            fs::read(full.join("ckpt-003").join(f)).unwrap(),
            fs::read(split.join("ckpt-003").join(f)).unwrap()
        );
    }
}

#[test]
fn baselines_need_no_checkpoint() {
    let dir = TempDir::new().unwrap();
    let inst = generate_sample(&dir);
    let out = ok(&["eval", &s(&inst), "--baseline", "random", "--seed", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "random");
    assert_eq!(report["n"], 13);
    assert!(report["expected_accuracy"].as_f64().is_some());
    let again = ok(&["eval", &s(&inst), "--baseline", "random", "--seed", "3"]);
    assert_eq!(out.stdout, again.stdout);
    ok(&["eval", &s(&inst), "--baseline", "mostfreq"]);
}

#[test]
fn eval_rejects_a_foreign_vocabulary() {
    let dir = TempDir::new().unwrap();
    let inst = generate_sample(&dir);
    let run = dir.path().join("run");
    ok(&["train", &s(&inst), "--out", &s(&run), "--config", &sample_config(), "--epochs", "1"]);

    let other_corpus = dir.path().join("other.jsonl");
    let docs = random_corpus(&SynthConfig::default(), 5, 1);
    write_corpus(&docs, fs::File::create(&other_corpus).unwrap()).unwrap();
    let other = dir.path().join("other-inst.jsonl");
    ok(&["generate", &s(&other_corpus), "--out", &s(&other)]);

    let out = par(&["eval", &s(&other), "--checkpoint", &s(&run.join("ckpt-001"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hash mismatch"), "{}", stderr(&out));

    // sharing the training vocabulary makes the same file acceptable
    let shared = dir.path().join("shared.jsonl");
    ok(&["generate", &s(&other_corpus), "--out", &s(&shared), "--vocab", &s(&dir.path().join("inst.vocab.json"))]);
    ok(&["eval", &s(&shared), "--checkpoint", &s(&run.join("ckpt-001"))]);
}

#[test]
fn multi_arg_generation_can_be_empty() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("single.jsonl");
    let config = SynthConfig {
        dobj_prob: 0.0,
        prep_prob: 0.0,
        ..Default::default()
    };
    write_corpus(&random_corpus(&config, 10, 2), fs::File::create(&corpus).unwrap()).unwrap();
    let inst = dir.path().join("multi.jsonl");
    let out = ok(&["generate", &s(&corpus), "--out", &s(&inst), "--multi-arg"]);
    assert_eq!(fs::read(&inst).unwrap(), b"");
    assert!(stderr(&out).contains("no multi-argument instances"), "{}", stderr(&out));
}

#[test]
fn outputs_are_idempotent() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["generate", &sample(), "--out", &s(&a)]);
    ok(&["generate", &sample(), "--out", &s(&b)]);
    ok(&["generate", &sample(), "--out", &s(&a)]);
    for ext in ["jsonl", "vocab.json", "stats.json"] {
        assert_eq!(
            fs::read(a.with_extension(ext)).unwrap(),
            fs::read(b.with_extension(ext)).unwrap(),
            "{ext}"
        );
    }
}

#[test]
fn toy_run_finishes_quickly_and_learns() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("toy.jsonl");
    write_corpus(&random_corpus(&SynthConfig::default(), 20, 4), fs::File::create(&corpus).unwrap()).unwrap();
    let all = dir.path().join("all.jsonl");
    ok(&["generate", &s(&corpus), "--out", &s(&all)]);
    let lines: Vec<String> = fs::read_to_string(&all).unwrap().lines().take(50).map(String::from).collect();
    assert_eq!(lines.len(), 50);
    let inst = dir.path().join("toy-inst.jsonl");
    fs::write(&inst, lines.join("\n") + "\n").unwrap();

    let config = dir.path().join("toy-config.json");
    fs::write(
        &config,
        r#"{"model": {"embedding_dim": 16, "hidden_dim": 16}, "train": {"epochs": 10, "batch_size": 10, "learning_rate": 0.05}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let start = Instant::now();
    ok(&[
        "train",
        &s(&inst),
        "--out",
        &s(&run),
        "--config",
        &s(&config),
        "--vocab",
        &s(&dir.path().join("all.vocab.json")),
    ]);
    assert!(start.elapsed() < Duration::from_secs(60));
    let log = read_log(&run);
    assert_eq!(log.len(), 10);
    assert!(log.last().unwrap().loss < log[0].loss, "{log:?}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}
