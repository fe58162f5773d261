//! End-to-end tests of the `ddit` binary: exit codes, file outputs, flag
//! defaults, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ddit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddit"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("ddit-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"{
    "model": {"num_blocks": 2, "hidden_dim": 8, "num_heads": 2},
    "train": {"batch_size": 4, "total_steps": 6, "checkpoint_interval": 3, "seed": 12}
}"#;

fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, TINY);
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("run").join("ckpt_0000006.ddit")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

// ── train ───────────────────────────────────────────────────────────────────

#[test]
fn train_zero_steps_writes_initial_checkpoint_only() {
    let dir = tmp("zero-steps");
    let cfg = write_config(
        &dir,
        r#"{"model": {"num_blocks": 2, "hidden_dim": 8, "num_heads": 2},
            "train": {"batch_size": 4, "total_steps": 0}}"#,
    );
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("run").join("ckpt_0000000.ddit").exists());
    let ckpts: Vec<_> = std::fs::read_dir(dir.join("run"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
        .collect();
    assert_eq!(ckpts.len(), 1, "only the initial checkpoint");
    let metrics = std::fs::read_to_string(dir.join("run").join("metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn malformed_json_config_exits_2_with_location() {
    let dir = tmp("bad-json");
    let cfg = write_config(&dir, "{\"model\": {\n  broken\n}}");
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line"), "diagnostic should carry a parse location: {err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tmp("unknown-key");
    let cfg = write_config(&dir, r#"{"model": {"blocks": 4}}"#);
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_run_reproduces_metrics_bitwise() {
    let dir = tmp("resume");
    let cfg = write_config(&dir, TINY);
    let full = dir.join("full");
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&full)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let resumed = dir.join("resumed");
    let out = ddit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&resumed)
        .arg("--resume")
        .arg(full.join("ckpt_0000003.ddit"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let parse = |p: PathBuf| -> Vec<(u64, u64)> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|line| {
                let v: serde_json::Value = serde_json::from_str(line).unwrap();
                (
                    v["step"].as_u64().unwrap(),
                    v["l_total"].as_f64().unwrap().to_bits(),
                )
            })
            .collect()
    };
    let full_metrics = parse(full.join("metrics.jsonl"));
    let resumed_metrics = parse(resumed.join("metrics.jsonl"));
    assert_eq!(full_metrics.len(), 6);
    assert_eq!(resumed_metrics.len(), 3);
    let tail: Vec<(u64, u64)> = full_metrics[3..].to_vec();
    assert_eq!(tail, resumed_metrics, "steps 4..6 must match bitwise");
}

// ── sample ──────────────────────────────────────────────────────────────────

#[test]
fn sample_defaults_to_250_steps_and_writes_csv() {
    let dir = tmp("sample-defaults");
    let ckpt = train_tiny(&dir);
    let out_path = dir.join("samples.csv");
    let out = ddit()
        .args(["sample", "--ckpt"])
        .arg(&ckpt)
        .args(["--n", "5", "--uncond", "--out"])
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("250 steps"), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = csv.trim_end().split('\n').collect();
    assert_eq!(lines[0], "x,y,class");
    assert_eq!(lines.len(), 6, "header + 5 rows");
    // unconditional sampling reports the null class (8 for gaussian8)
    assert!(lines[1].ends_with(",8"));
}

#[test]
fn sample_zero_count_writes_empty_output() {
    let dir = tmp("sample-empty");
    let ckpt = train_tiny(&dir);
    let out_path = dir.join("empty.csv");
    let out = ddit()
        .args(["sample", "--ckpt"])
        .arg(&ckpt)
        .args(["--n", "0", "--uncond", "--out"])
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv.trim_end(), "x,y,class", "no sample rows");
}

#[test]
fn sample_is_deterministic_byte_for_byte() {
    let dir = tmp("sample-determinism");
    let ckpt = train_tiny(&dir);
    let run = |name: &str| -> Vec<u8> {
        let path = dir.join(name);
        let out = ddit()
            .args(["sample", "--ckpt"])
            .arg(&ckpt)
            .args(["--n", "16", "--steps", "20", "--class", "3", "--seed", "9", "--out"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(&path).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn sample_rejects_out_of_range_class() {
    let dir = tmp("sample-bad-class");
    let ckpt = train_tiny(&dir);
    let out = ddit()
        .args(["sample", "--ckpt"])
        .arg(&ckpt)
        .args(["--n", "1", "--class", "99", "--out"])
        .arg(dir.join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_missing_checkpoint_fails() {
    let dir = tmp("sample-missing");
    let out = ddit()
        .args(["sample", "--ckpt"])
        .arg(dir.join("nope.ddit"))
        .args(["--n", "1", "--uncond", "--out"])
        .arg(dir.join("x.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

// ── analyze ─────────────────────────────────────────────────────────────────

#[test]
fn analyze_writes_l_plus_one_square_csv() {
    let dir = tmp("analyze");
    let ckpt = train_tiny(&dir);
    let csv_path = dir.join("cka.csv");
    let out = ddit()
        .args(["analyze", "--ckpt"])
        .arg(&ckpt)
        .args(["--t", "0.5", "--batch", "16", "--kernel", "linear", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.trim_end().split('\n').collect();
    assert_eq!(lines.len(), 3, "L+1 rows for L=2");
    for line in &lines {
        assert_eq!(line.split(',').count(), 3, "L+1 columns");
    }
}

#[test]
fn analyze_two_timesteps_unit_diagonals() {
    let dir = tmp("analyze-two-t");
    let ckpt = train_tiny(&dir);
    for t in ["0.25", "0.75"] {
        let csv_path = dir.join(format!("cka_{t}.csv"));
        let out = ddit()
            .args(["analyze", "--ckpt"])
            .arg(&ckpt)
            .args(["--t", t, "--batch", "16", "--kernel", "linear", "--out"])
            .arg(&csv_path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        for (i, line) in csv.trim_end().split('\n').skip(1).enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            let diag: f64 = cells[i + 1].parse().unwrap();
            assert!((diag - 1.0).abs() < 1e-9, "t={t} row {i}: {diag}");
        }
    }
}

#[test]
fn analyze_rejects_t_zero() {
    let dir = tmp("analyze-bad-t");
    let ckpt = train_tiny(&dir);
    let out = ddit()
        .args(["analyze", "--ckpt"])
        .arg(&ckpt)
        .args(["--t", "0.0", "--out"])
        .arg(dir.join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_feature_dump_has_block_tensors() {
    let dir = tmp("analyze-dump");
    let ckpt = train_tiny(&dir);
    let out = ddit()
        .args(["analyze", "--ckpt"])
        .arg(&ckpt)
        .args(["--t", "0.5", "--batch", "8", "--out"])
        .arg(dir.join("cka.csv"))
        .arg("--dump-features")
        .arg(dir.join("features.ddit"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let (features, step, t) = ddit::analysis::read_feature_dump(&dir.join("features.ddit")).unwrap();
    assert_eq!(features.len(), 2);
    assert_eq!(features[0].shape(), &[8, 1, 8]);
    assert_eq!(step, 6);
    assert_eq!(t, Some(0.5));
}

// ── gradcheck ───────────────────────────────────────────────────────────────

#[test]
fn gradcheck_default_config_passes_and_lists_components() {
    let out = ddit().arg("gradcheck").output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["flow_matching", "orth", "mi", "disp", "alignment", "total"] {
        assert!(stdout.contains(name), "report must list {name}: {stdout}");
    }
}

#[test]
fn gradcheck_corrupted_gradient_exits_1() {
    let out = ddit().args(["gradcheck", "--corrupt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_oversize_config_rejected() {
    let dir = tmp("gradcheck-oversize");
    let cfg = write_config(&dir, r#"{"model": {"num_blocks": 6, "hidden_dim": 64}}"#);
    let out = ddit()
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

// ── help ────────────────────────────────────────────────────────────────────

#[test]
fn help_lists_flags_with_defaults() {
    for (cmd, expect) in [
        ("train", vec!["--config", "--out", "--resume"]),
        (
            "sample",
            vec!["--ckpt", "--mode", "--steps", "--cfg", "--class", "--uncond", "--n", "--seed", "--out", "250"],
        ),
        ("analyze", vec!["--ckpt", "--t", "--batch", "--kernel", "--out", "--dump-features", "rbf"]),
        ("gradcheck", vec!["--config"]),
    ] {
        let out = ddit().args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for needle in expect {
            assert!(text.contains(needle), "{cmd} --help missing {needle}:\n{text}");
        }
    }
}
