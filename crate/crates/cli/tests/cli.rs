use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_planner::config::load_config;
use moe_planner::costmodel::indicators;
use moe_planner::strategy::{check_memory, enumerate_strategies};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-planner"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_2x2.json")
}

fn core_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let listed: Vec<PathBuf> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| PathBuf::from(v.as_str().unwrap()))
        .collect();
    let mut on_disk: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    let mut listed_sorted = listed.clone();
    on_disk.sort();
    listed_sorted.sort();
    assert_eq!(listed_sorted, on_disk);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_config_is_an_input_error_naming_the_path() {
    let out = run(&["analyze", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/definitely/not/here.json"), "{err}");
}

#[test]
fn unknown_flag_is_an_input_error() {
    let out = run(&["analyze", "--config", s(&tiny()), "--objective", "fastest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_reports_the_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let config = core_file("fixtures/h20_2x8.json");
    let out = run(&["analyze", "--config", s(&config), "--objective", "itl", "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_manifest_complete(dir.path());

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["objective"], "itl");
    let b = load_config(&config).unwrap();
    let best = enumerate_strategies(&b.cluster, &b.model)
        .into_iter()
        .filter(|s| check_memory(s, &b.model, &b.cluster, &b.workload).feasible)
        .map(|s| (indicators(&s, &b.model, &b.workload, &b.cluster, &b.calibration).unwrap().itl, s.to_string()))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert_eq!(report["rows"][0]["strategy"], best.1);
    let table = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(table.starts_with("# objective: itl\n"));
}

#[test]
fn analyze_refits_calibration_from_a_profile() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.csv");
    // intra: alpha 1e-6, beta 1e11; one round of size/degree bytes per RS.
    let mut rows = String::from("op_kind,size,degree,scope,measured_seconds\n");
    for size in [1e6, 4e6, 1.6e7] {
        rows.push_str(&format!("RS,{size},4,intra,{}\n", 1e-6 + size / 4.0 / 1e11));
    }
    rows.push_str("MoE_compute,1e9,1,intra,2e-5\nMoE_compute,2e9,1,intra,4e-5\n");
    fs::write(&profile, rows).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "analyze",
        "--config",
        s(&core_file("fixtures/deepseek_r1_4x8.json")),
        "--profile",
        s(&profile),
        "--out-dir",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fitted: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("calibration.json")).unwrap()).unwrap();
    let beta = fitted["intra"]["beta"].as_f64().unwrap();
    assert!((beta / 1e11 - 1.0).abs() < 1e-6, "{beta}");
    assert!((fitted["compute_coeff"].as_f64().unwrap() / 2e-14 - 1.0).abs() < 1e-9);
    assert_eq!(manifest(&out_dir)["inputs"][0], s(&profile));
    assert_manifest_complete(&out_dir);
}

#[test]
fn bad_profile_rows_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.csv");
    fs::write(&profile, "op_kind,size,degree,scope,measured_seconds\nRS,1e6,4,intra,-1\n").unwrap();
    let out = run(&["analyze", "--config", s(&tiny()), "--profile", s(&profile), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

fn simulate(dir: &Path, seed: &str) -> Output {
    run(&[
        "simulate",
        "--config",
        s(&tiny()),
        "--strategy",
        "TP=2 + DP=2, TP=2 + EP=2",
        "--seed",
        seed,
        "--mode",
        "both",
        "--out-dir",
        s(dir),
    ])
}

#[test]
fn simulate_both_modes_verifies_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), "3");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_manifest_complete(dir.path());
    assert_eq!(manifest(dir.path())["seed"], 3);
    let verdicts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verification.json")).unwrap()).unwrap();
    assert_eq!(verdicts.as_array().unwrap().len(), 2);
    assert!(verdicts.as_array().unwrap().iter().all(|v| v["pass"] == true));
    let overlap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("overlap.json")).unwrap()).unwrap();
    assert_eq!(overlap["overlap"]["fused_le_sync"], true);
    let (f, s) = (
        overlap["overlap"]["fused_makespan"].as_f64().unwrap(),
        overlap["overlap"]["sync_makespan"].as_f64().unwrap(),
    );
    assert!(f <= s);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(simulate(a.path(), "42").status.success());
    assert!(simulate(b.path(), "42").status.success());
    for name in ["trace_fused.csv", "trace_baseline.csv", "verification.json", "overlap.json"] {
        let (x, y) = (fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        assert!(x == y, "{name} differs");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(simulate(c.path(), "43").status.success());
    assert_ne!(
        fs::read(a.path().join("trace_fused.csv")).unwrap(),
        fs::read(c.path().join("trace_fused.csv")).unwrap()
    );
}

#[test]
fn simulate_wide_expert_parallel_on_thirty_two_devices() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        s(&core_file("fixtures/deepseek_r1_4x8.json")),
        "--strategy",
        "TP=4 + DP=8, EP=32",
        "--mode",
        "fused",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdicts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verification.json")).unwrap()).unwrap();
    assert_eq!(verdicts[0]["groups"], 32);
    assert_eq!(verdicts[0]["pass"], true);
}

#[test]
fn pipeline_strategies_cannot_be_simulated() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        s(&core_file("fixtures/deepseek_r1_4x8.json")),
        "--strategy",
        "TP=8 [PP=4]",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gantt_matches_frozen_chart() {
    let dir = tempfile::tempdir().unwrap();
    let trace = core_file("tests/golden/tiny_fused_trace.csv");
    let out = run(&["gantt", "--config", s(&tiny()), "--trace", s(&trace), "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(dir.path().join("tiny_fused_trace_gantt.svg")).unwrap();
    assert_eq!(svg, fs::read_to_string(core_file("tests/golden/tiny_fused_gantt.svg")).unwrap());
    let events = fs::read_to_string(&trace).unwrap().lines().count() - 1;
    assert_eq!(svg.matches("class=\"bar\"").count(), events);
    assert_manifest_complete(dir.path());

    // Running again overwrites with identical bytes.
    assert!(run(&["gantt", "--config", s(&tiny()), "--trace", s(&trace), "--out-dir", s(dir.path())]).status.success());
    assert_eq!(svg, fs::read_to_string(dir.path().join("tiny_fused_trace_gantt.svg")).unwrap());
}

#[test]
fn gantt_formats_and_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, format!("{}\n", moe_planner::simcluster::TRACE_CSV_HEADER)).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["gantt", "--config", s(&tiny()), "--trace", s(&empty), "--format", "csv", "--out-dir", s(&out_dir)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(out_dir.join("empty_gantt.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", moe_planner::timeline::GANTT_CSV_HEADER));
}

#[test]
fn malformed_trace_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        format!("{}\n0,0,route,route,,0,4,0,compute,\n1,0,route,route,,zero,4,0,compute,0\n", moe_planner::simcluster::TRACE_CSV_HEADER),
    )
    .unwrap();
    let out = run(&["gantt", "--config", s(&tiny()), "--trace", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn compare_lists_requested_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let config = core_file("fixtures/deepseek_r1_4x8.json");
    let out = run(&[
        "compare",
        "--config",
        s(&config),
        "--strategy",
        "TP=8 [PP=4]",
        "--strategy",
        "TP=4 + DP=8, EP=32",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("compare.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["lambda_comparison"]["lambda_mix"].as_f64().unwrap() > 0.0);
    assert_manifest_complete(dir.path());

    let one = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--config", s(&config), "--strategy", "TP=4 + DP=8, EP=32", "--out-dir", s(one.path())]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.path().join("compare.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn compare_rejects_unparsable_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--config", s(&tiny()), "--strategy", "TP=3 + XX=2", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
