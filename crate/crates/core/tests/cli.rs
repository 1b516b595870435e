use std::process::Command;

fn tia() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tia"))
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(tia().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(tia().arg("train").output().unwrap().status.code(), Some(1));
    assert_eq!(tia().args(["eval", "--ckpt", "x"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = tia()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let out = tia()
        .args(["eval", "--ckpt", "/nonexistent/checkpoint.tia1", "--episodes", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}
