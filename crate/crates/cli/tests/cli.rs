//! End-to-end checks of the command-line surface: exit codes, artifact
//! determinism, and the pipeline wiring.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use camaudit_core::data::pgm_from_bytes;
use camaudit_core::model::{build_mini_masked_vgg, save_checkpoint, MiniVggConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_camaudit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("camaudit-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_exits_zero_everywhere() {
    for args in [
        vec!["--help"],
        vec!["verify-theory", "--help"],
        vec!["train", "--help"],
        vec!["explain", "--help"],
        vec!["audit", "--help"],
        vec!["compose", "--help"],
    ] {
        let out = run(&args);
        assert!(out.status.success(), "{args:?} failed");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn malformed_flag_exits_two_with_usage() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = temp_dir("config");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = run(&["compose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown key"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn flags_override_config_file() {
    let dir = temp_dir("override");
    let cfg = dir.join("theory.cfg");
    std::fs::write(&cfg, "seeds = 12\nfilters = 20\nmoment_samples = 2000\n").unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "verify-theory",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "6",
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("\"n_seeds\": 6"), "flag must beat the config file");
    assert!(report.contains("\"filters\": 20"), "config value must beat the default");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn verify_theory_at_twenty_filters_trivially_passes() {
    let dir = temp_dir("v20");
    let out = run(&[
        "verify-theory",
        "--filters",
        "20",
        "--seeds",
        "10",
        "--moment-samples",
        "2000",
        "--out",
        dir.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(report.contains("\"judged\": false"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compose_writes_deterministic_manifest() {
    let dir = temp_dir("compose");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let result = run(&[
            "compose",
            "--per-class",
            "4",
            "--composites-per-class",
            "10",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    }
    let manifest_a = std::fs::read(out_a.join("manifest.json")).unwrap();
    let manifest_b = std::fs::read(out_b.join("manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b, "identical flags and seed must give identical bytes");

    let manifest: serde_json::Value = serde_json::from_slice(&manifest_a).unwrap();
    let items = manifest["items"].as_array().unwrap();
    assert_eq!(items.len(), 100, "10 composites for each of 10 classes");

    let first = items[0]["path"].as_str().unwrap();
    let pgm_a = std::fs::read(out_a.join(first)).unwrap();
    let pgm_b = std::fs::read(out_b.join(first)).unwrap();
    assert_eq!(pgm_a, pgm_b);
    std::fs::remove_dir_all(&dir).ok();
}

fn write_masked_checkpoint(dir: &Path) -> PathBuf {
    let model = build_mini_masked_vgg(&MiniVggConfig { seed: 11, ..Default::default() }).unwrap();
    let path = dir.join("masked.ckpt");
    save_checkpoint(&model, &path).unwrap();
    path
}

#[test]
fn explain_hirescam_has_zero_heat_in_dead_zone() {
    let dir = temp_dir("explain");
    let ckpt = write_masked_checkpoint(&dir);
    let out_dir = dir.join("out");
    let out = run(&[
        "explain",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--method",
        "hirescam",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("hirescam.ppm").exists());
    let map = pgm_from_bytes(&std::fs::read(out_dir.join("hirescam_map.pgm")).unwrap()).unwrap();
    // Dead zone of the default masked model starts at row 46.
    for r in 46..56 {
        for c in 0..56 {
            assert_eq!(map.at3(0, r, c), 0.0, "row {r} col {c}");
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn audit_csv_has_one_row_per_method_and_is_deterministic() {
    let dir = temp_dir("audit");
    let ckpt = write_masked_checkpoint(&dir);
    let args = |out: &Path| {
        vec![
            "audit".to_string(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--per-class".into(),
            "4".into(),
            "--stack-per-class".into(),
            "2".into(),
            "--methods".into(),
            "gradcam,hirescam,eigencam".into(),
            "--seed".into(),
            "5".into(),
            "--threads".into(),
            "2".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let argv = args(out);
        let argv: Vec<&str> = argv.iter().map(|s| s.as_str()).collect();
        let result = run(&argv);
        assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    }
    let csv = std::fs::read_to_string(out_a.join("audit.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per method: {csv}");
    assert!(lines[1].starts_with("gradcam,"));
    assert!(lines[2].starts_with("hirescam,"));
    assert!(lines[3].starts_with("eigencam,"));
    assert_eq!(
        std::fs::read(out_a.join("audit.json")).unwrap(),
        std::fs::read(out_b.join("audit.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(out_a.join("audit.csv")).unwrap(),
        std::fs::read(out_b.join("audit.csv")).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = temp_dir("train");
    let out = run(&[
        "train",
        "--per-class",
        "3",
        "--stack-per-class",
        "3",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--seed",
        "4",
        "--threads",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("model.ckpt").exists());
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,acc\n"));
    assert_eq!(log.lines().count(), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_checkpoint_is_io_error() {
    let out = run(&["audit", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_reruns_are_bit_identical() {
    let dir = temp_dir("train-determinism");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let result = run(&[
            "train",
            "--per-class",
            "2",
            "--stack-per-class",
            "2",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--seed",
            "6",
            "--threads",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    }
    assert_eq!(
        std::fs::read(out_a.join("model.ckpt")).unwrap(),
        std::fs::read(out_b.join("model.ckpt")).unwrap(),
        "checkpoints must be bit-identical for identical flags and seed"
    );
    assert_eq!(
        std::fs::read(out_a.join("train_log.csv")).unwrap(),
        std::fs::read(out_b.join("train_log.csv")).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}
