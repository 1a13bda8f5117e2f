//! End-to-end runs of the `drawdown-lab` binary: exit codes, output files and
//! byte-identical reruns.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drawdown-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, command: &str, config: Option<&str>, extra: &[&str]) -> Output {
    let out = dir.join("out");
    let mut args = vec![
        command.to_string(),
        "--quiet".into(),
        "--out".into(),
        out.display().to_string(),
    ];
    if let Some(text) = config {
        let path = dir.join("scenario.toml");
        fs::write(&path, text).unwrap();
        args.push("--config".into());
        args.push(path.display().to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    bin(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/summary.json")).unwrap()).unwrap()
}

#[test]
fn certify_worked_tree_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "certify", None, &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(dir.path());
    assert_eq!(s["schema"], "drawdown-lab/summary@1");
    assert_eq!(s["command"], "certify");
    assert_eq!(s["passed"], true);
    let y = s["results"]["y"].as_f64().unwrap();
    assert!((y - 2.0 / 7.0).abs() < 1e-6);
    let nodes = fs::read_to_string(dir.path().join("out/nodes.csv")).unwrap();
    assert_eq!(nodes.lines().count(), 4);
}

#[test]
fn boundary_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        "tree-solve",
        Some("[constraint]\nq = 3.0\n[budget]\nx = 6.0\n"),
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    let out = run_in(
        dir.path(),
        "tree-solve",
        Some("[constraint]\nq = 3.0\n[budget]\nx = 5.0\n"),
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn schema_violations_exit_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        "certify",
        Some("[constraint]\nlambda = 2.0\n"),
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint.lambda"));
    let out = run_in(dir.path(), "certify", Some("[run]\nbogus = 1\n"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "certify", Some("command = \"riedel\"\n"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let config = "[model.kernel]\nkind = \"brownian\"\ntheta = 0.4\nrate = 0.05\ndelta_pref = 0.1\n[budget]\nx = 100.0\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run_in(
            d.path(),
            "riedel",
            Some(config),
            &["--paths", "200", "--seed", "7"],
        );
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for file in ["summary.json", "paths.csv"] {
        let x = fs::read_to_string(a.path().join("out").join(file)).unwrap();
        let y = fs::read_to_string(b.path().join("out").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between reruns");
    }
    assert_eq!(summary(a.path())["seed"], 7);
}

#[test]
fn tree_documents_resolve_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("tree.json"),
        include_str!("../fixtures/worked_tree.json"),
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        "envelope",
        Some("[model]\ntree = \"tree.json\"\n[budget]\ny = 0.2857142857142857\n"),
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("out/sweep.csv").exists());
    let out = run_in(
        dir.path(),
        "envelope",
        Some("[model]\ntree = \"tree.json\"\ndeflator = \"W\"\n"),
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn remaining_commands_succeed() {
    for command in ["esssup-demo", "tree-solve", "value-surface", "selftest"] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_in(dir.path(), command, None, &[]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{command}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(summary(dir.path())["passed"], true);
    }
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        "floor-match",
        Some("[constraint]\nq = 2.0\nlambda = 0.5\n"),
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
