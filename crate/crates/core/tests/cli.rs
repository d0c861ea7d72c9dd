//! The binary end to end: documents, exit codes, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tileplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tileplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tileplan(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const MATMUL: &str = r#"{"tensors":[{"id":"x","shape":[4,4],"role":"input"},{"id":"w","shape":[4,4],"role":"weight"},
    {"id":"y","shape":[4,4],"role":"activation"}],
    "ops":[{"id":"mm","kind":"matmul","inputs":["x","w"],"output":"y"}]}"#;

struct Workspace {
    _dir: TempDir,
    root: PathBuf,
}

/// A small backward+update MLP, its optimized assignment, a two-level
/// hierarchy and the resulting plan.
fn workspace() -> Workspace {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let p = |n| path(&root, n);
    ok(&["gen", "--model", "mlp", "--batch", "8", "--dims", "8,16,8", "--backward", "--update", "-o", &p("g.json")]);
    ok(&["optimize", "--graph", &p("g.json"), "--devices", "4", "-o", &p("a.json")]);
    std::fs::write(
        p("h.json"),
        r#"{"levels":[{"label":"network","bandwidth_bytes_per_s":1e9},{"label":"pcie","bandwidth_bytes_per_s":1.6e10}]}"#,
    )
    .unwrap();
    std::fs::write(p("mm.json"), MATMUL).unwrap();
    ok(&["plan", "--graph", &p("g.json"), "--assignment", &p("a.json"), "--hierarchy", &p("h.json"), "-o", &p("plan.json"), "--dot", &p("plan.dot")]);
    Workspace { _dir: dir, root }
}

#[test]
fn refcost_reproduces_textbook_volumes() {
    let mb = |s: &str| -> f64 {
        let v: Value = serde_json::from_str(&ok(&[
            "refcost", "--layers", "5", "--width", "300", "--batch", "400", "--devices", "16", "--strategy", s,
        ]))
        .unwrap();
        v["megabytes"].as_f64().unwrap()
    };
    assert_eq!((mb("data"), mb("model"), mb("hybrid:4")), (57.6, 76.8, 33.6));
}

#[test]
fn devices_must_be_a_power_of_two() {
    let ws = workspace();
    let out = tileplan(&["optimize", "--graph", &path(&ws.root, "g.json"), "--devices", "6"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a power of two"));
    assert!(out.stdout.is_empty());
}

#[test]
fn aligned_matmul_optimizes_to_zero() {
    let dir = TempDir::new().unwrap();
    let g = path(dir.path(), "mm.json");
    std::fs::write(&g, MATMUL).unwrap();
    let v: Value = serde_json::from_str(&ok(&["optimize", "--graph", &g, "--devices", "2"])).unwrap();
    assert_eq!(v["total_elements"], 0);
}

#[test]
fn compare_favours_the_optimizer() {
    let dir = TempDir::new().unwrap();
    let g = path(dir.path(), "g.json");
    ok(&["gen", "--model", "mlp", "--batch", "400", "--dims", "300,300,300,300,300,300", "--backward", "--update", "-o", &g]);
    let v: Value = serde_json::from_str(&ok(&["compare", "--graph", &g, "--devices", "16"])).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let opt = rows.last().unwrap()["bytes"].as_u64().unwrap();
    let mut feasible = 0;
    for r in &rows[..rows.len() - 1] {
        if let Some(b) = r["bytes"].as_u64() {
            assert!(opt <= b, "{r}");
            feasible += 1;
        } else {
            assert!(r["infeasible"].is_string());
        }
    }
    assert_eq!(feasible, 2, "width 300 cannot be cut four ways by the model preset");
}

#[test]
fn simulate_with_numerics() {
    let ws = workspace();
    let p = |n| path(&ws.root, n);
    let v: Value = serde_json::from_str(&ok(&[
        "simulate", "--plan", &p("plan.json"), "--hierarchy", &p("h.json"), "--check-numerics", "--graph", &p("g.json"), "--seed", "7",
    ]))
    .unwrap();
    assert!(v["numeric"]["max_rel"].as_f64().unwrap() <= 1e-12);
    assert_eq!(v["per_level"][0]["label"], "network");
    assert!(std::fs::read_to_string(p("plan.dot")).unwrap().starts_with("digraph"));
}

#[test]
fn bad_input_exits_nonzero() {
    let out = tileplan(&["cost", "--graph", "/nonexistent.json", "--preset", "data", "--devices", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn every_subcommand_is_deterministic() {
    let ws = workspace();
    let p = |n| path(&ws.root, n);
    let (g, a, h, plan, mm) = (p("g.json"), p("a.json"), p("h.json"), p("plan.json"), p("mm.json"));
    let runs: Vec<Vec<&str>> = vec![
        vec!["gen", "--model", "cnn", "--batch", "4", "--dims", "2,4", "--image", "6,6", "--filter", "3,3", "--backward"],
        vec!["optimize", "--graph", &g, "--devices", "4"],
        vec!["cost", "--graph", &g, "--assignment", &a],
        vec!["cost", "--graph", &g, "--preset", "hybrid", "--devices", "4"],
        vec!["compare", "--graph", &g, "--devices", "4"],
        vec!["refcost", "--layers", "5", "--width", "300", "--batch", "400", "--devices", "16", "--strategy", "model"],
        vec!["plan", "--graph", &g, "--assignment", &a, "--hierarchy", &h],
        vec!["simulate", "--plan", &plan, "--hierarchy", &h, "--check-numerics", "--graph", &g, "--seed", "3"],
        vec!["oracle", "--graph", &mm, "--k", "2"],
        vec!["oracle", "conv-cost", "--src", "R red", "--dst", "C r", "--shape", "4,8"],
    ];
    for args in runs {
        let first = ok(&args);
        assert!(!first.is_empty(), "{args:?}");
        assert_eq!(first, ok(&args), "{args:?}");
    }
}
