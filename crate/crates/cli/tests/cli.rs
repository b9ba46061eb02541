use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 5
save_snapshots = true

[dataset]
n_classes = 2
samples_per_class = 20
input_dim = 4

[split]
n_tasks = 1

[model]
width = 8

[method]
kind = "ft-ce"

[training]
epochs = 2
batch_size = 8

[probe]
max_iterations = 200
"#;

fn reprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reprobe"))
        .args(args)
        .current_dir(dir)
        .env("REPROBE_OUT", dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn dry_run_plans_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", TINY);
    let out = reprobe(dir.path(), &["run", "c.toml", "--dry-run"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("tiny"), "{text}");
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn unknown_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", &TINY.replace("width = 8", "width = 8\nwidht = 9"));
    let out = reprobe(dir.path(), &["run", "c.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn single_task_run_then_report_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", TINY);
    let out = reprobe(dir.path(), &["run", "c.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/tiny");
    for f in ["ledger.json", "config.json", "summary.csv", "figures/task01.svg", "snapshots/task01.rpsn"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let before = std::fs::read(run.join("summary.csv")).unwrap();
    let svg = std::fs::read(run.join("figures/task01.svg")).unwrap();
    let out = reprobe(dir.path(), &["report", "runs/tiny/ledger.json", "--out", "again"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(dir.path().join("again/summary.csv")).unwrap(), before);
    assert_eq!(std::fs::read(dir.path().join("again/figures/task01.svg")).unwrap(), svg);

    let data = "label,f0,f1,f2,f3\n0,1,0,0,0\n1,0,1,0,0\n0,1.1,0,0,0\n1,0,0.9,0,0\n0,0.9,0.1,0,0\n1,0.1,1,0,0\n";
    write(dir.path(), "d.csv", data);
    let out = reprobe(dir.path(), &["probe", "runs/tiny/snapshots/task01.rpsn", "d.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["train_accuracy"].as_f64().is_some());
}

#[test]
fn compare_refuses_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", TINY);
    write(
        dir.path(),
        "b.toml",
        &TINY.replace("name = \"tiny\"", "name = \"other\"").replace("input_dim = 4", "input_dim = 5"),
    );
    write(dir.path(), "c.toml", &TINY.replace("name = \"tiny\"", "name = \"same\"").replace("width = 8", "width = 16"));
    for f in ["a.toml", "b.toml", "c.toml"] {
        assert!(reprobe(dir.path(), &["run", f]).status.success());
    }
    let bad = reprobe(
        dir.path(),
        &["compare", "runs/tiny/ledger.json", "runs/other/ledger.json"],
    );
    assert!(!bad.status.success());
    let good = reprobe(
        dir.path(),
        &["compare", "runs/tiny/ledger.json", "runs/same/ledger.json", "--out", "cmp"],
    );
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("cmp/task1.svg").exists());
}

#[test]
fn missing_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reprobe(dir.path(), &["run", "nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
}
