//! CLI contract: exit codes and error routing.

use std::process::Command;

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_flametomo"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn usage_errors_exit_64() {
    let (code, _) = run(&["frobnicate"]);
    assert_eq!(code, 64);
    let (code, err) = run(&[
        "reconstruct",
        "--config",
        "/nonexistent.toml",
        "--method",
        "vg/banana",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(code, 64, "bad method should be a usage error: {err}");
}

#[test]
fn help_exits_zero() {
    let (code, _) = run(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn missing_config_exits_2() {
    let (code, err) = run(&["synth", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/desk.toml");
    let config = config.to_str().unwrap();
    // reconstruct before synth: no truth/measurement in --out.
    let (code, err) = run(&[
        "reconstruct",
        "--config",
        config,
        "--method",
        "vg/tv",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{err}");
    let (code, err) = run(&[
        "evaluate",
        "--config",
        config,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn bad_workers_env_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_flametomo"))
        .args(["synth", "--config", "/nonexistent.toml", "--out", "/tmp/x"])
        .env("FLAMETOMO_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
