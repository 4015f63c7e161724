use std::path::Path;
use std::process::{Command, Output};

use hsfl_core::config::KEYS;

fn hsfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsfl"))
        .args(args)
        .env_remove("HSFL_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "run",
        "--rounds",
        "1",
        "--clients",
        "2",
        "--samples",
        "200",
        "--output-dir",
        out,
    ];
    args.extend_from_slice(extra);
    hsfl(&args)
}

#[test]
fn run_prints_summary_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("rounds = 1"));
    assert!(dir.path().join("metrics.csv").is_file());
    assert!(dir.path().join("checkpoint.hsfl").is_file());
}

#[test]
fn invalid_value_exits_1_and_names_the_key() {
    let o = hsfl(&["run", "--gamma", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1() {
    let o = hsfl(&["run", "--config", "/nonexistent/hsfl.conf"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn audit_of_recorded_transcript_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        small_run(dir.path(), &["--record-transcript"])
            .status
            .code(),
        Some(0)
    );
    let o = hsfl(&["audit", dir.path().join("transcript.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn audit_of_corrupted_transcript_exits_2_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        small_run(dir.path(), &["--record-transcript"])
            .status
            .code(),
        Some(0)
    );
    let path = dir.path().join("transcript.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xA5;
    std::fs::write(&path, &bytes).unwrap();
    let o = hsfl(&["audit", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));
}

#[test]
fn audit_of_empty_transcript_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.bin");
    std::fs::write(&path, b"").unwrap();
    assert_eq!(
        hsfl(&["audit", path.to_str().unwrap()]).status.code(),
        Some(0)
    );
}

#[test]
fn inspect_lists_every_entity() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_run(dir.path(), &[]).status.code(), Some(0));
    let o = hsfl(&[
        "inspect",
        dir.path().join("checkpoint.hsfl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.contains("client 0:") && text.contains("client 1:") && text.contains("server:"),
        "{text}"
    );
}

#[test]
fn inspect_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_run(dir.path(), &[]).status.code(), Some(0));
    let good = std::fs::read(dir.path().join("checkpoint.hsfl")).unwrap();

    let bad = dir.path().join("bad.hsfl");
    let mut bytes = good.clone();
    bytes[0] = b'X';
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(
        hsfl(&["inspect", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );

    std::fs::write(&bad, &good[..good.len() - 3]).unwrap();
    let o = hsfl(&["inspect", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn run_help_lists_every_key() {
    let o = hsfl(&["run", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for (key, _) in KEYS {
        assert!(
            text.contains(&format!("--{}", key.replace('_', "-"))),
            "{key}"
        );
    }
}

#[test]
fn unknown_subcommand_exits_1() {
    assert_eq!(hsfl(&["train"]).status.code(), Some(1));
}
