//! End-to-end checks of the command-line binary: exit codes, artifact
//! layout, rerun determinism, and the train/decode round trip.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_bytenet");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary spawns");
    // The child may exit before reading (refused checkpoint); a broken
    // pipe here is part of the scenario, not a harness failure.
    let _ = child.stdin.take().unwrap().write_all(input.as_bytes());
    child.wait_with_output().expect("binary finishes")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn train_tiny_lm(dir: &Path, steps: &str) -> std::path::PathBuf {
    fs::create_dir_all(dir).unwrap();
    let corpus = dir.join("corpus.txt");
    fs::write(&corpus, "the rain in spain stays mainly in the plain\n".repeat(40)).unwrap();
    let out = dir.join(format!("lm-{}", steps));
    let cfg = dir.join("tiny.json");
    fs::write(
        &cfg,
        r#"{ "hidden": 16, "num_sets": 1, "window_total": 32, "window_context": 16, "batch_main": 4, "batch_aux": 4 }"#,
    )
    .unwrap();
    let res = run(&[
        "train-lm",
        "--corpus",
        corpus.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        steps,
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "train-lm failed: {}", stderr_of(&res));
    out
}

#[test]
fn missing_corpus_file_exits_with_the_ingestion_code() {
    let out = run(&["train-lm", "--corpus", "/nonexistent/corpus.txt", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("/nonexistent/corpus.txt"));
}

#[test]
fn unknown_config_key_is_rejected_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "hidden": 8, "hidden_size": 8 }"#).unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "abcabc").unwrap();
    let out = run(&[
        "train-lm",
        "--corpus",
        corpus.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("bad.json"), "stderr: {}", err);
    assert!(err.contains("hidden_size"), "stderr: {}", err);
}

#[test]
fn zero_steps_still_writes_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny_lm(dir.path(), "0");
    assert!(out.join("model.bnet").is_file());
    assert!(out.join("vocab.json").is_file());
    assert!(out.join("manifest.json").is_file());
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap(), "step,loss_nats,bits_per_char\n");
}

#[test]
fn trace_has_exactly_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny_lm(dir.path(), "5");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "step,loss_nats,bits_per_char");
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{},", i)), "row {}: {}", i, line);
    }
}

#[test]
fn identical_seeds_rerun_to_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny_lm(&dir.path().join("a"), "5");
    let b = train_tiny_lm(&dir.path().join("b"), "5");
    assert_eq!(fs::read(a.join("model.bnet")).unwrap(), fs::read(b.join("model.bnet")).unwrap());
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn eval_lm_reports_bits_per_char() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_lm(dir.path(), "5");
    let held = dir.path().join("held.txt");
    fs::write(&held, "the rain in spain\nstays mainly in the plain\n").unwrap();
    let out = run(&[
        "eval-lm",
        "--model",
        model.to_str().unwrap(),
        "--corpus",
        held.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let line = text.lines().last().unwrap();
    assert!(line.starts_with("bits_per_char "), "stdout: {}", text);
    let value: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(value.is_finite() && value > 0.0);
}

#[test]
fn lm_checkpoint_is_refused_by_translation_commands() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny_lm(dir.path(), "0");
    let out = run_with_stdin(&["translate", "--model", model.to_str().unwrap()], "abc\n");
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
}

#[test]
fn bleu_command_reproduces_the_toy_corpus_score() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "the quick brown fox jumps over the dog\nthe the cat sat on mat\n").unwrap();
    fs::write(
        &reference,
        "the quick brown fox jumps over the lazy dog\nthe cat sat on the mat\n",
    )
    .unwrap();
    let out = run(&[
        "bleu",
        "--hyp",
        hyp.to_str().unwrap(),
        "--ref",
        reference.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "BLEU 0.704675");
    assert!(lines.next().unwrap().starts_with("precisions 1.000000 0.750000 0.700000 0.625000"));
    assert!(lines.next().unwrap().starts_with("brevity_penalty 0.931063"));
    assert_eq!(lines.next().unwrap(), "lengths hyp 14 ref 15");
}

#[test]
fn copy_model_round_trips_through_translate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("copy.json");
    fs::write(&cfg, r#"{ "hidden": 32, "num_sets": 1, "bucket_quantum": 16 }"#).unwrap();
    let model = dir.path().join("copy-model");
    let train = run(&[
        "train-mt",
        "--task",
        "copy",
        "--count",
        "300",
        "--min-len",
        "3",
        "--max-len",
        "6",
        "--alphabet",
        "abcd",
        "--data-seed",
        "1",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "400",
        "--seed",
        "2",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(train.status.success(), "train-mt failed: {}", stderr_of(&train));

    let out = run_with_stdin(
        &[
            "translate",
            "--model",
            model.to_str().unwrap(),
            "--beam-width",
            "4",
            "--quantum",
            "16",
        ],
        "abcd\ncadb\n",
    );
    assert!(out.status.success(), "translate failed: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), "abcd\ncadb\n");

    // The same checkpoint drives saliency; rows are source characters.
    let sal = run(&[
        "saliency",
        "--model",
        model.to_str().unwrap(),
        "--source",
        "abcd",
        "--target",
        "abcd",
        "--quantum",
        "16",
    ]);
    assert!(sal.status.success(), "saliency failed: {}", stderr_of(&sal));
    assert!(stdout_of(&sal).contains("# source words"));
}
