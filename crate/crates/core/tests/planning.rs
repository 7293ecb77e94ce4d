mod common;

use moe_planner::analyzer::{compare_report, pareto_front, select_strategy, ComparisonReport, Objective, SelectOptions};
use moe_planner::config::validate_bundle;
use moe_planner::costmodel::{lambda_ep_baseline, lambda_mix};
use moe_planner::strategy::parse_strategy;

use common::fixture;

fn compare(texts: &[&str], objective: Objective) -> ComparisonReport {
    let bundle = fixture("deepseek_r1_4x8.json");
    let candidates = texts.iter().map(|t| parse_strategy(t).unwrap()).collect();
    let options = SelectOptions {
        candidates: Some(candidates),
        include_infeasible: true,
        ..SelectOptions::default()
    };
    let ranked = select_strategy(&bundle, objective, &options).unwrap();
    compare_report(&ranked, usize::MAX)
}

#[test]
fn fixtures_load_cleanly() {
    for name in ["deepseek_r1_4x8.json", "h20_2x8.json"] {
        let bundle = fixture(name);
        assert!(validate_bundle(&bundle).is_empty(), "{name}");
    }
}

#[test]
fn pipeline_baseline_against_wide_expert_parallel() {
    let report = compare(&["TP=8 [PP=4]", "TP=4 + DP=8, EP=32"], Objective::Ttft);
    assert_eq!(report.rows.len(), 2);
    let mut names: Vec<&str> = report.rows.iter().map(|r| r.strategy.as_str()).collect();
    names.sort();
    assert_eq!(names, ["TP=4 + DP=8, EP=32", "TP=8 [PP=4]"]);
    let pp = report.rows.iter().find(|r| r.strategy == "TP=8 [PP=4]").unwrap();
    assert!(pp.breakdown.get("prefill.p2p").copied().unwrap_or(0.0) > 0.0, "{:?}", pp.breakdown);
    // Unsharded pipeline weights exceed 64 GB per device.
    assert!(!pp.memory_feasible);
    assert_eq!(report.rows[1].strategy, "TP=8 [PP=4]");
    let lc = report.lambda_comparison.as_ref().unwrap();
    assert_eq!(lc.ep_strategy, "TP=8 + DP=4, EP=32");
    assert_eq!(lc.mix_strategy, "TP=8 + DP=4, TP=8 + EP=4");
    assert_eq!(lc.ep_inter_a2a_bytes, 8.0 * lc.mix_inter_a2a_bytes);
    let table = report.render_table();
    assert!(table.contains("lambda_ep") && table.contains("lambda_mix"));
}

#[test]
fn single_and_duplicate_columns() {
    let one = compare(&["TP=4 + DP=8, EP=32"], Objective::Itl);
    assert_eq!(one.rows.len(), 1);
    let twice = compare(&["TP=4 + DP=8, EP=32", "TP=4 + DP=8, EP=32"], Objective::Itl);
    assert_eq!(twice.rows.len(), 2);
    let (a, b) = (&twice.rows[0], &twice.rows[1]);
    assert_eq!((&a.strategy, a.ttft, a.itl, a.theta, &a.breakdown), (&b.strategy, b.ttft, b.itl, b.theta, &b.breakdown));
    assert_eq!(a.itl, one.rows[0].itl);
}

#[test]
fn report_header_names_the_objective() {
    for objective in [Objective::Ttft, Objective::Throughput] {
        let report = compare(&["TP=8 [PP=4]", "TP=4 + DP=8, EP=32"], objective);
        assert!(report.render_table().starts_with(&format!("# objective: {objective}\n")));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["objective"], objective.to_string());
        let back: ComparisonReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}

#[test]
fn lambda_rows_match_the_layer_formulas() {
    let bundle = fixture("h20_2x8.json");
    let ranked = select_strategy(&bundle, Objective::Throughput, &SelectOptions::default()).unwrap();
    let lc = compare_report(&ranked, 3).lambda_comparison.unwrap();
    let ep = lambda_ep_baseline(&bundle.model, &bundle.workload, &bundle.cluster, &bundle.calibration);
    let mix = lambda_mix(&bundle.model, &bundle.workload, &bundle.cluster, &bundle.calibration);
    assert_eq!((lc.lambda_ep, lc.lambda_mix, lc.mix_ag), (ep.total, mix.total, mix.ag));
    // NVLink-class intra links make the extra all-gather cheap.
    assert!(lc.lambda_mix < lc.lambda_ep);
}

#[test]
fn each_objective_winner_is_on_the_pareto_front() {
    let bundle = fixture("h20_2x8.json");
    let ranked = select_strategy(&bundle, Objective::Ttft, &SelectOptions::default()).unwrap();
    let front: Vec<String> = pareto_front(&ranked).into_iter().map(|e| e.label.clone()).collect();
    assert!(!front.is_empty());
    for objective in [Objective::Ttft, Objective::Itl, Objective::Throughput] {
        let top = select_strategy(&bundle, objective, &SelectOptions::default()).unwrap().top().label.clone();
        assert!(front.contains(&top), "{objective}: {top} not in {front:?}");
    }
}

#[test]
fn latency_limits_filter_candidates() {
    let bundle = fixture("h20_2x8.json");
    let all = select_strategy(&bundle, Objective::Throughput, &SelectOptions::default()).unwrap();
    let best_itl = all.entries.iter().map(|e| e.estimate.itl).fold(f64::INFINITY, f64::min);
    let tight = SelectOptions {
        max_itl: Some(best_itl),
        ..SelectOptions::default()
    };
    let ranked = select_strategy(&bundle, Objective::Throughput, &tight).unwrap();
    assert!(ranked.entries.iter().all(|e| e.estimate.itl <= best_itl));
    assert_eq!(ranked.excluded_slo, all.entries.len() - ranked.entries.len());
    let impossible = SelectOptions {
        max_itl: Some(best_itl * 0.5),
        ..SelectOptions::default()
    };
    assert!(select_strategy(&bundle, Objective::Throughput, &impossible).is_err());
}
