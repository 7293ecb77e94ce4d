#![allow(dead_code)]

use std::path::PathBuf;

use moe_planner::config::{load_config, CalibrationCoefficients, ClusterConfig, ConfigBundle};
use moe_planner::simcluster::{
    build_cluster, hybrid_strategy, run_moe_block, BlockOutput, ExpertSpec, LogicalTensor, Mode, RouterSpec,
    SimOptions,
};

pub fn fixture(name: &str) -> ConfigBundle {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` against a frozen file byte for byte. With
/// `UPDATE_GOLDEN=1` the file is rewritten instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == actual {
        Ok(())
    } else {
        let line = want
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        Err(format!("{name} differs at {line}"))
    }
}

/// 2x2 cluster with round numbers: intra 8 B/s, inter 4 B/s, zero latency,
/// four element-ops per second.
pub fn tiny_cluster() -> (ClusterConfig, CalibrationCoefficients) {
    let cluster = ClusterConfig {
        n_node: 2,
        n_proc: 2,
        intra_alpha: 0.0,
        intra_beta: 8.0,
        inter_alpha: 0.0,
        inter_beta: 4.0,
        mem_per_device: 1e9,
        compute_rate: 4.0,
    };
    let calib = CalibrationCoefficients::defaults_for(&cluster);
    (cluster, calib)
}

/// Four tokens of width four, two experts, top-1 round robin.
pub fn tiny_block(mode: Mode) -> BlockOutput {
    let x = LogicalTensor::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
    let router = RouterSpec::round_robin(4, 2, 1).unwrap();
    let mut cluster = build_cluster(2, 2).unwrap();
    run_moe_block(
        &mut cluster,
        &hybrid_strategy(2, 2),
        &x,
        &router,
        &ExpertSpec::affine_default(2),
        &SimOptions { mode, capacity: None },
    )
    .unwrap()
}

/// Prints the verdict line and fails the test on a miss.
pub fn report(id: u32, title: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => println!("criterion {id} PASS  {title}: {detail}"),
        Err(detail) => {
            println!("criterion {id} FAIL  {title}: {detail}");
            panic!("criterion {id} failed: {detail}");
        }
    }
}
