//! End-to-end runs of the `microsegnet` binary on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_microsegnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 6] = ["--input-size", "64", "--epochs", "1", "--set", "batch_size=4"];

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    ok(&[
        "gen-data", "--out", s(&data), "--seed", "3", "--num-cases", "6", "--slices-per-case", "2", "--test-cases",
        "2", "--image-size", "64",
    ]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("case_000/slice_0_img.png").exists());

    ok(&["hard-mask", "--dataset", s(&data)]);
    assert!(data.join("case_000/slice_1_hard.png").exists());
    let fractions = fs::read_to_string(data.join("hard_fraction.csv")).unwrap();
    assert_eq!(fractions.lines().count(), 1 + 12);

    let ckpt = run.join("model.ckpt");
    let mut train = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--seed", "1"];
    train.extend(FAST);
    ok(&train);
    for f in ["train_log.csv", "epochs.csv", "config.toml", "artifacts.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read(run.join("train_log.csv")).unwrap();
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("input_size = 64") && echoed.contains("seed = 1"));

    // the same seed through the binary reproduces the log byte for byte
    let again = tmp.path().join("again/model.ckpt");
    train[4] = s(&again);
    ok(&train);
    assert_eq!(log, fs::read(tmp.path().join("again/train_log.csv")).unwrap());

    let eval = ok(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&run), "--overlays", "2",
    ]);
    assert!(eval.contains("2 patients"));
    let patients = fs::read_to_string(run.join("metrics_patients.csv")).unwrap();
    assert_eq!(patients.lines().count(), 1 + 2 + 1, "header, two patients, mean row");
    assert_eq!(fs::read_dir(run.join("overlays")).unwrap().count(), 2);

    let mut ablate = vec!["ablate", "--data", s(&data), "--ratios", "1,4", "--runs", "1", "--out", s(&run)];
    ablate.extend(FAST);
    ok(&ablate);
    assert_eq!(fs::read_to_string(run.join("ablation.csv")).unwrap().lines().count(), 3);
    assert!(run.join("ablation.svg").exists());

    let mut compare = vec!["compare", "--data", s(&data), "--variants", "plain,microsegnet", "--runs", "1", "--out", s(&run)];
    compare.extend(FAST);
    ok(&compare);
    let cmp = fs::read_to_string(run.join("comparison.csv")).unwrap();
    assert!(cmp.contains("0.942 / 2.11 mm"));

    ok(&["report", "--out", s(&run)]);
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    for section in ["## Training", "## Evaluation", "## Ablation", "## Comparison", "## Qualitative overlays"] {
        assert!(md.contains(section), "report lacks {section}");
    }
    assert!(!md.contains("## Missing artifacts"), "{md}");
    let first = fs::read(run.join("report.md")).unwrap();
    ok(&["report", "--out", s(&run)]);
    assert_eq!(first, fs::read(run.join("report.md")).unwrap());

    let manifest = fs::read_to_string(run.join("artifacts.json")).unwrap();
    for key in ["checkpoint", "train_log", "patient_metrics", "ablation", "comparison", "report"] {
        assert!(manifest.contains(&format!("\"{key}\"")), "manifest lacks {key}");
    }

    // a config file that disagrees with the checkpoint is refused
    let cfg = tmp.path().join("other.toml");
    fs::write(&cfg, "input_size = 96\n").unwrap();
    let bad = cli(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--config", s(&cfg)]);
    assert!(!bad.status.success());
}

#[test]
fn config_file_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "nonsense_key = 3\n").unwrap();
    let out = cli(&["train", "--data", s(tmp.path()), "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let out = cli(&["train", "--data", s(&tmp.path().join("nowhere"))]);
    assert!(!out.status.success());
}

#[test]
fn report_on_an_empty_directory_succeeds_with_stubs() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["report", "--out", s(tmp.path())]);
    assert!(stdout.contains("missing: train_log.csv"));
    let md = fs::read_to_string(tmp.path().join("report.md")).unwrap();
    assert!(md.contains("_no data_"));
}
