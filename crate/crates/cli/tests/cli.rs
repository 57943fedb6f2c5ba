use std::path::Path;
use std::process::{Command, Output};

fn adstest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adstest")).args(args).output().expect("spawn adstest")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "scenario = \"lane_keeping\"\nstrategy = \"instruction\"\ndomain = \"night\"\nn_steps = 50\nseed = 3\noutput_dir = \"out\"\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero() {
    assert_eq!(adstest(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(adstest(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(adstest(&["run", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}

#[test]
fn run_writes_log_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = adstest(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::fs::read_to_string(dir.path().join("out/run.jsonl")).unwrap();
    assert_eq!(run.lines().filter(|l| l.contains("\"step\"")).count(), 50);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert!(report.get("ftc").is_some());
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let target = dir.path().join("other");
    let out = adstest(&["run", "--config", &cfg, "--steps", "20", "--strategy", "none", "--out", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::fs::read_to_string(target.join("run.jsonl")).unwrap();
    assert_eq!(run.lines().filter(|l| l.contains("\"step\"")).count(), 20);
}

#[test]
fn validator_eval_prints_confusion_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("conf");
    let ds = ds.to_str().unwrap();
    let out = adstest(&["dataset", "confusion", "--n", "30", "--corrupt", "0.5", "--out", ds]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = adstest(&["validator", "eval", "--dataset", ds]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let first = text.lines().next().unwrap_or_default();
    let cells: Vec<usize> = first
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(cells.len(), 4, "{text}");
    assert_eq!(cells.iter().sum::<usize>(), 30);
    assert!(text.contains("gt valid"), "{text}");
}
