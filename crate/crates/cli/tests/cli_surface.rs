//! End-to-end checks of the command-line surface: exit codes, error
//! wording, and a reduced-size run of the whole pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emosynth_core::config::ExperimentConfig;
use emosynth_core::{EmotionId, Segment, SegmentList};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emosynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn emosynth")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Reduced config shared by the pipeline tests.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_utterances = 6;
    cfg.corpus.min_frames = 12;
    cfg.corpus.max_frames = 18;
    cfg.ser_train.epochs = 3;
    cfg.ser_train.batch_size = 4;
    cfg.sed_train.epochs = 2;
    cfg.sed_train.batch_size = 4;
    cfg.tts_train.steps = 4;
    cfg.tts_train.batch_size = 2;
    cfg.sampler.n_steps = 8;
    cfg.evaluation.ladder_seeds = vec![0];
    cfg.evaluation.ablation_seeds = vec![0];
    cfg.evaluation.n_syntheses = 2;
    cfg.validate().expect("tiny config validates");
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json_pretty()).expect("write config");
    path
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout_of(&out);
    for sub in ["gen-corpus", "train-sed", "train-tts", "synthesize", "eval-eder", "eval-era", "ablate", "selftest"] {
        assert!(text.contains(sub), "help is missing `{sub}`:\n{text}");
    }
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.to_lowercase().contains("usage"), "no usage hint:\n{err}");
}

#[test]
fn missing_config_file_exits_two() {
    let out = run(&["gen-corpus", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn invalid_config_value_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"sed_train": {"epochs": 0}}"#).unwrap();
    let out = run(&["gen-corpus", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("sed_train"), "field not named:\n{err}");
}

#[test]
fn unknown_config_key_exits_one_and_is_quoted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"sed_train": {"lamda_weight": 0.5}}"#).unwrap();
    let out = run(&["gen-corpus", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("lamda_weight"), "unknown key not quoted:\n{err}");
}

#[test]
fn eval_eder_on_identical_files_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let list = SegmentList::new(
        vec![
            Segment { start: 0.0, end: 0.4, label: EmotionId(0) },
            Segment { start: 0.4, end: 1.0, label: EmotionId(2) },
        ],
        1.0,
    )
    .unwrap();
    let path = dir.path().join("ref.csv");
    list.write_csv(&path).unwrap();
    let out = run(&[
        "eval-eder",
        "--ref",
        path.to_str().unwrap(),
        "--hyp",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out).trim(), "0.000000");
}

#[test]
fn eval_eder_with_missing_file_exits_two() {
    let out = run(&["eval-eder", "--ref", "/nope/a.csv", "--hyp", "/nope/b.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthesize_before_training_exits_two_and_points_at_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "synthesize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("training stage"), "stderr: {}", stderr_of(&out));
}

#[test]
fn pipeline_smoke_runs_every_stage_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let stage = |head: &[&str]| {
        let mut args: Vec<&str> = head.to_vec();
        args.extend_from_slice(&common);
        let out = run(&args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "`{}` failed: {}",
            head.join(" "),
            stderr_of(&out)
        );
        out
    };

    stage(&["gen-corpus"]);
    assert!(out_dir.join("corpus").is_dir());
    assert!(out_dir.join("resolved_config.json").is_file());

    let sed = stage(&["train-sed"]);
    assert!(out_dir.join("ladder.csv").is_file());
    assert!(out_dir.join("ladder.json").is_file());
    assert!(out_dir.join("checkpoints/seed0/sed_mlmmd.json").is_file());
    assert!(stdout_of(&sed).contains("target eder"));

    stage(&["train-tts"]);
    assert!(out_dir.join("checkpoints/seed0/tts_full.json").is_file());

    stage(&["synthesize", "--count", "2"]);
    let manifest = out_dir.join("synth/manifest.json");
    assert!(manifest.is_file());

    let era = stage(&["eval-era"]);
    assert!(out_dir.join("era.json").is_file());
    let printed = stdout_of(&era);
    let last = printed.lines().last().unwrap_or_default();
    assert!(
        last.split_whitespace().any(|tok| tok.parse::<f64>().is_ok()),
        "no accuracy in `{printed}`"
    );

    stage(&["ablate"]);
    assert!(out_dir.join("ablation.csv").is_file());
    let table = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    for variant in ["full", "no_sed", "no_frame_label", "no_cross_domain"] {
        assert!(table.contains(variant), "ablation table missing {variant}:\n{table}");
    }
}

#[test]
fn selftest_exits_zero_and_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["selftest", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("ok")).count(),
        9,
        "expected nine passing checks:\n{text}"
    );
}
