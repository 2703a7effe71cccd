//! End-to-end checks of the binary: dispatch, config loading, seed
//! override, and the exit-code contract (0 ok, 2 bad input, 3 broken
//! stage dependency).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotfill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

const CONFIG: &str = r#"{
  "d": 12,
  "d_g": 12,
  "m": 6,
  "ef_construction": 24,
  "ef_search": 32,
  "k": 3,
  "beam": 3,
  "max_len": 3,
  "dpr": {"learn_rate": 0.05, "batch_size": 4, "epochs": 1}
}"#;

const SPEC: &str = r#"{
  "n_entities": 12,
  "n_relations": 2,
  "facts_per_entity": 1,
  "objects_per_relation": 6,
  "distractor_sentences": 1,
  "vocab_noise": 8,
  "train_fraction": 0.75,
  "dev_fraction": 0.25,
  "seed": 5
}"#;

fn write_inputs(dir: &Path) {
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    fs::write(dir.join("spec.json"), SPEC).unwrap();
}

#[test]
fn chain_runs_stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);

    let steps: &[&[&str]] = &[
        &["synth", "--spec", "spec.json"],
        &["segment"],
        &["build-sparse"],
        &["mine-negatives"],
        &["train-dpr"],
        &["encode-corpus"],
        &["build-index"],
        &["predict", "--encoders", "dpr", "--generator", "init"],
        &["evaluate"],
    ];
    for step in steps {
        let mut args = vec!["--config", "config.json"];
        args.extend_from_slice(step);
        let out = run_in(dir, &args);
        assert_ok(&out, step[0]);
        assert!(!out.stdout.is_empty(), "{} printed a summary", step[0]);
    }

    for artifact in [
        "run/passages.jsonl",
        "run/vocab.json",
        "run/sparse.json",
        "run/triples_bm25.jsonl",
        "run/checkpoints/encoders_dpr.ckpt",
        "run/checkpoints/generator_init.ckpt",
        "run/index/vectors.bin",
        "run/index/dense.idx",
        "run/reports/predictions.jsonl",
        "run/reports/metrics.json",
        "run/manifests/evaluate.json",
    ] {
        assert!(dir.join(artifact).is_file(), "{artifact} exists");
    }

    let metrics = fs::read_to_string(dir.join("run/reports/metrics.json")).unwrap();
    assert!(metrics.contains("\"style\""));
}

#[test]
fn out_of_order_stage_exits_3_and_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);

    let out = run_in(dir, &["--config", "config.json", "build-sparse"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("run `segment` first"),
        "stderr names the stage to run: {stderr}"
    );

    let out = run_in(dir, &["--config", "config.json", "train-rag"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Unknown subcommand: clap usage error.
    let out = run_in(dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // Config file that fails validation.
    fs::write(dir.join("bad.json"), r#"{"d": 0}"#).unwrap();
    let out = run_in(dir, &["--config", "bad.json", "segment"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // Missing config file.
    let out = run_in(dir, &["--config", "nope.json", "segment"]);
    assert_eq!(out.status.code(), Some(2));

    // Few-shot adaptation without training data.
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    let out = run_in(
        dir,
        &[
            "--config",
            "config.json",
            "adapt",
            "--corpus",
            "x.jsonl",
            "--dev",
            "y.jsonl",
            "--candidates",
            "c.txt",
            "--few-shot",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--train"));
}

#[test]
fn seed_flag_overrides_the_generator_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for sub in ["a", "b", "c"] {
        fs::create_dir(dir.join(sub)).unwrap();
        write_inputs(&dir.join(sub));
    }

    let args = ["--config", "config.json", "--seed", "11", "synth"];
    assert_ok(&run_in(&dir.join("a"), &args), "synth a");
    assert_ok(&run_in(&dir.join("b"), &args), "synth b");
    assert_ok(
        &run_in(
            &dir.join("c"),
            &["--config", "config.json", "--seed", "12", "synth"],
        ),
        "synth c",
    );

    let corpus = |sub: &str| fs::read(dir.join(sub).join("corpus.jsonl")).unwrap();
    assert_eq!(corpus("a"), corpus("b"), "same seed, same corpus");
    assert_ne!(corpus("a"), corpus("c"), "different seed, different corpus");
}
