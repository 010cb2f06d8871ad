use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_forestlens"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One synthetic cohort directory shared by the tests in this file.
fn cohort_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&["synth", "--seed", "7", "--out", s(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

const QUICK: [&str; 6] = ["--seeds", "3", "--trees", "5", "--thresholds", "19,20"];

fn quick_run(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--cohort", s(cohort_dir()), "--out", s(out)];
    args.extend(QUICK);
    args.extend(extra);
    run(&args)
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn synth_writes_raw_logs_rule_and_manifest() {
    let files = read_dir(cohort_dir());
    for f in [
        "sessions.csv",
        "its.csv",
        "assessments.csv",
        "roster.csv",
        "cohort.csv",
        "planted_rule.json",
        "manifest.json",
    ] {
        assert!(files.contains_key(f), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&files["manifest.json"]).unwrap();
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 6);
}

#[test]
fn repeated_and_replayed_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let before = read_dir(cohort_dir());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(quick_run("run", &a, &[]).status.success());
    assert!(quick_run("run", &b, &[]).status.success());
    let out = run(&["run", "--config", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (ra, rb, rc) = (read_dir(&a), read_dir(&b), read_dir(&c));
    assert_eq!(ra, rb);
    assert_eq!(ra, rc);
    for f in ["report.json", "table3.csv", "final_tree.dot", "final_tree.json", "manifest.json"] {
        assert!(ra.contains_key(f), "missing {f}");
    }
    // inputs are untouched
    assert_eq!(before, read_dir(cohort_dir()));
}

#[test]
fn manifest_digests_match_outputs() {
    use sha2::{Digest, Sha256};
    let tmp = tempfile::tempdir().unwrap();
    assert!(quick_run("run", tmp.path(), &["--no-baselines"]).status.success());
    let files = read_dir(tmp.path());
    let manifest: serde_json::Value = serde_json::from_slice(&files["manifest.json"]).unwrap();
    let outputs = manifest["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), 4);
    for (name, digest) in outputs {
        assert_eq!(digest.as_str().unwrap(), hex::encode(Sha256::digest(&files[name])));
    }
    assert_eq!(manifest["forest_seeds"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);
}

#[test]
fn talk_features_label_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(quick_run("run", tmp.path(), &["--features", "talk", "--no-baselines"]).status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["feature_set"], "talk-moves-only");
    let table = fs::read_to_string(tmp.path().join("table3.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("talk-moves-only,"), "{table}");
}

#[test]
fn baselines_table_has_three_rows_and_four_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quick_run("baselines", tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(tmp.path().join("table3.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "features,DT,RFC,RFR,Extracted DT");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), 5);
        for c in &cells[1..] {
            let v: f64 = c.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{l}");
        }
    }
}

#[test]
fn change_subcommand_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["change", "--cohort", s(cohort_dir()), "--out", s(tmp.path())];
    args.extend(["--seeds", "3", "--trees", "5", "--no-baselines"]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_eps"], 4012);
    assert_eq!(report["config"]["thresholds"], serde_json::json!([2.0, 2.5, 3.0, 3.5]));
}

#[test]
fn export_tree_rerenders_saved_models() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(quick_run("run", tmp.path(), &["--no-baselines"]).status.success());
    let dot = fs::read_to_string(tmp.path().join("final_tree.dot")).unwrap();
    for model in ["final_tree.json", "report.json"] {
        let out = run(&["export-tree", "--model", s(&tmp.path().join(model))]);
        assert!(out.status.success());
        assert_eq!(String::from_utf8(out.stdout).unwrap(), dot);
    }
    let json_out: PathBuf = tmp.path().join("again.json");
    let out = run(&[
        "export-tree",
        "--model",
        s(&tmp.path().join("final_tree.json")),
        "--format",
        "json",
        "--out",
        s(&json_out),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&json_out).unwrap(), fs::read(tmp.path().join("final_tree.json")).unwrap());
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = s(tmp.path());
    let code = |args: &[&str]| run(args).status.code().unwrap();

    assert_eq!(code(&["run", "--nonsense", "--out", out_dir]), 2);
    assert_eq!(code(&["run", "--out", out_dir]), 2);
    assert_eq!(code(&["run", "--synth-seed", "1", "--thresholds", "5:1:1", "--out", out_dir]), 2);
    assert_eq!(code(&["run", "--synth-seed", "1", "--trees", "0", "--out", out_dir]), 2);
    assert_eq!(code(&["run", "--config", "/nonexistent.json", "--out", out_dir]), 2);

    let missing = run(&["run", "--cohort", "/nonexistent/cohort", "--out", out_dir]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/cohort"));

    // every EP is below 40: no usable threshold
    let degenerate = run(&[
        "run", "--cohort", s(cohort_dir()), "--out", out_dir, "--thresholds", "40", "--seeds", "2", "--no-baselines",
    ]);
    assert_eq!(degenerate.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&degenerate.stderr).is_empty());

    assert_eq!(code(&["export-tree", "--model", "/nonexistent.json"]), 1);
}
