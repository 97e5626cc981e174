use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn quoteflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quoteflow"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(dir: &Path) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline.json");
    fs::copy(src, dir.join("pipeline.json")).unwrap();
}

#[test]
fn success_exits_zero_and_writes_only_to_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = quoteflow(&["simulate", "--config", "pipeline.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let mut top: Vec<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, ["out", "pipeline.json"]);
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = quoteflow(&["all", "--config", "absent.json"], dir.path());
    assert_eq!(missing.status.code(), Some(1));

    fs::write(dir.path().join("bad.json"), "{\"paths\": 3, \"extra\": true}").unwrap();
    let bad = quoteflow(&["all", "--config", "bad.json"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid configuration"));

    let unknown_stage = quoteflow(&["everything", "--config", "bad.json"], dir.path());
    assert_eq!(unknown_stage.status.code(), Some(1));

    fixture(dir.path());
    let early = quoteflow(&["fit", "--config", "pipeline.json"], dir.path());
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("salience"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = quoteflow(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--config"));
}
