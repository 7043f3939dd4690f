//! Command-line behavior: exit codes, config rejection, failure paths.

use std::path::{Path, PathBuf};
use std::process::Command;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).expect("create tmp dir");
    dir
}

fn rcg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rcg"))
        .args(args)
        .output()
        .expect("spawn rcg")
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = rcg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn missing_config_file_exits_2_naming_path() {
    let out = rcg(&["prior-check", "--config", "/nonexistent/nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.toml"), "{err}");
}

#[test]
fn unknown_config_key_exits_2_naming_key() {
    let dir = tmp_dir("badkey");
    let path = dir.join("bad.toml");
    std::fs::write(&path, "[train]\nalhpa = 1.0\n").unwrap();
    let out = rcg(&["train", "--config", path.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alhpa"), "{err}");
}

#[test]
fn bad_format_version_exits_2() {
    let dir = tmp_dir("badver");
    let path = dir.join("v9.toml");
    std::fs::write(&path, "format_version = 9\n").unwrap();
    let out = rcg(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format_version"));
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tmp_dir("noeval");
    let out = rcg(&["eval", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.checkpoint"));
}

#[test]
fn failed_check_exits_1() {
    // 50 Monte Carlo samples cannot hit 2% relative error on the KL
    // comparison, so the check legitimately fails.
    let dir = tmp_dir("klfail");
    let out = rcg(&[
        "kl-validate",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "50",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn prior_sample_writes_deterministic_csv() {
    let dir = tmp_dir("psample");
    let a_out = dir.join("a");
    let b_out = dir.join("b");
    for out in [&a_out, &b_out] {
        let res = rcg(&[
            "prior-sample",
            "--out",
            out.to_str().unwrap(),
            "--n",
            "20",
            "--seed",
            "5",
        ]);
        assert!(res.status.success());
    }
    let a = std::fs::read(a_out.join("samples.csv")).unwrap();
    let b = std::fs::read(b_out.join("samples.csv")).unwrap();
    assert_eq!(a, b);
    // Default prior: K = 5, D = 4 -> 20 columns per row.
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 20);
}

#[test]
fn train_then_eval_reports_identical_metrics() {
    let dir = tmp_dir("traineval");
    let run = dir.join("run");
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "[synth]\nper_class_source = 8\nper_class_target = 8\nper_class_test = 4\nseed = 3\n\n\
             [train]\nrounds = 1\nepochs_per_round = 2\nseed = 4\n\n\
             [eval]\ncheckpoint = \"{}\"\n",
            run.join("checkpoint.txt").display()
        ),
    )
    .unwrap();
    let t = rcg(&["train", "--config", cfg_path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let train_line = String::from_utf8_lossy(&t.stdout).into_owned();

    let e = rcg(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let eval_line = String::from_utf8_lossy(&e.stdout).into_owned();

    // Both report the same final metrics (checkpoint round-trip is exact).
    let pick = |s: &str| {
        s.split("accuracy")
            .nth(1)
            .map(|rest| rest.chars().take(7).collect::<String>())
            .unwrap_or_default()
    };
    assert_eq!(pick(&train_line), pick(&eval_line), "{train_line} vs {eval_line}");
}
