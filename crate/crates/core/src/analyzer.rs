//! Offline planning: fits link and compute coefficients from profiling
//! observations, scores every memory-feasible strategy with the cost model,
//! and ranks the results for one explicit objective.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CalibrationCoefficients, ConfigBundle, LinkOverride};
use crate::costmodel::{indicators, lambda_ep_baseline, lambda_mix, CostError, CostEstimate, LayerComm};
use crate::strategy::{
    check_memory, classify_dp_ep, enumerate_strategies, parse_strategy, DpEpRelation, ParallelStrategy,
    StrategyError,
};

/// Relative tolerance under which two objective values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Recorded in every ranking and report.
pub const METHOD_NOTE: &str =
    "coefficients are fitted from observations (or taken from the bundle); strategies are ranked by the analytic model";

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("degenerate fit for {class}: {reason}")]
    DegenerateFit { class: String, reason: String },
    #[error("invalid observation on line {line}: {reason}")]
    Observation { line: usize, reason: String },
    #[error("no feasible strategy: {0}")]
    NoFeasibleStrategy(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "AR")]
    Ar,
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "AG")]
    Ag,
    #[serde(rename = "A2A")]
    A2a,
    #[serde(rename = "P2P")]
    P2p,
    #[serde(rename = "MoE_compute")]
    MoeCompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkScope {
    Intra,
    Inter,
}

impl fmt::Display for LinkScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkScope::Intra => "intra",
            LinkScope::Inter => "inter",
        })
    }
}

/// One timed operation. `size` is bytes for collectives and element-ops
/// (active parameters times tokens) for `MoE_compute`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingObservation {
    pub op_kind: OpKind,
    pub size: f64,
    pub degree: u64,
    pub scope: LinkScope,
    pub measured_seconds: f64,
}

/// Reads observations from CSV with header `op_kind,size,degree,scope,measured_seconds`.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<ProfilingObservation>, AnalyzerError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ProfilingObservation>().enumerate() {
        let obs = row?;
        let line = i + 2;
        if !(obs.measured_seconds > 0.0) {
            return Err(AnalyzerError::Observation {
                line,
                reason: "measured_seconds must be positive".into(),
            });
        }
        if obs.degree == 0 {
            return Err(AnalyzerError::Observation {
                line,
                reason: "degree must be at least 1".into(),
            });
        }
        out.push(obs);
    }
    Ok(out)
}

/// Regressors `(rounds, bytes-per-round summed)` so that the modelled time is
/// `rounds * alpha + bytes / beta`. `None` for zero-cost degree-1 collectives.
fn link_features(obs: &ProfilingObservation, ar_literal: bool) -> Option<(f64, f64)> {
    let d = obs.degree as f64;
    match obs.op_kind {
        OpKind::P2p => Some((1.0, obs.size)),
        _ if obs.degree <= 1 => None,
        OpKind::Rs | OpKind::Ag => Some((1.0, obs.size / d)),
        OpKind::Ar => {
            let part = if ar_literal { obs.size / d } else { obs.size };
            Some((2.0, 2.0 * part / d))
        }
        OpKind::A2a => Some((d - 1.0, (d - 1.0) * obs.size / d)),
        OpKind::MoeCompute => None,
    }
}

/// Ordinary least squares of `y = a * x1 + g * x2`.
fn fit_two(class: &str, rows: &[(f64, f64, f64)]) -> Result<(f64, f64), AnalyzerError> {
    let degenerate = |reason: &str| AnalyzerError::DegenerateFit {
        class: class.to_string(),
        reason: reason.to_string(),
    };
    if rows.len() < 2 {
        return Err(degenerate("at least two observations are required"));
    }
    // Column scaling keeps the normal equations well conditioned.
    let s1 = rows.iter().map(|r| r.0.abs()).fold(0.0, f64::max);
    let s2 = rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    if s1 == 0.0 || s2 == 0.0 {
        return Err(degenerate("all features are zero"));
    }
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x1, x2, y) in rows {
        let (u, v) = (x1 / s1, x2 / s2);
        a11 += u * u;
        a12 += u * v;
        a22 += v * v;
        b1 += u * y;
        b2 += v * y;
    }
    let det = a11 * a22 - a12 * a12;
    if det <= 1e-12 * a11 * a22 {
        return Err(degenerate("observation sizes do not vary"));
    }
    let a = (a22 * b1 - a12 * b2) / det / s1;
    let g = (a11 * b2 - a12 * b1) / det / s2;
    if !(g > 0.0) || a < 0.0 {
        return Err(degenerate("fit produced a non-physical alpha or beta"));
    }
    Ok((a, g))
}

/// Fits `alpha`, `beta` per link class and the compute coefficient through the
/// origin. Classes without observations keep the values in `base`.
pub fn calibrate(
    observations: &[ProfilingObservation],
    base: &CalibrationCoefficients,
) -> Result<CalibrationCoefficients, AnalyzerError> {
    let mut out = base.clone();
    for scope in [LinkScope::Intra, LinkScope::Inter] {
        let class: Vec<&ProfilingObservation> = observations
            .iter()
            .filter(|o| o.op_kind != OpKind::MoeCompute && o.scope == scope)
            .collect();
        if class.is_empty() {
            continue;
        }
        let rows: Vec<(f64, f64, f64)> = class
            .iter()
            .filter_map(|o| link_features(o, base.ar_literal).map(|(x1, x2)| (x1, x2, o.measured_seconds)))
            .collect();
        if rows.len() < class.len() {
            log::warn!(
                "{scope} link: ignoring {} degree-1 observations",
                class.len() - rows.len()
            );
        }
        let (alpha, gamma) = fit_two(&format!("{scope} link"), &rows)?;
        let fitted = Some(LinkOverride {
            alpha,
            beta: 1.0 / gamma,
        });
        match scope {
            LinkScope::Intra => out.intra = fitted,
            LinkScope::Inter => out.inter = fitted,
        }
    }

    let compute: Vec<&ProfilingObservation> = observations
        .iter()
        .filter(|o| o.op_kind == OpKind::MoeCompute)
        .collect();
    if !compute.is_empty() {
        let degenerate = |reason: &str| AnalyzerError::DegenerateFit {
            class: "MoE_compute".into(),
            reason: reason.into(),
        };
        if compute.len() < 2 {
            return Err(degenerate("at least two observations are required"));
        }
        let sxx: f64 = compute.iter().map(|o| o.size * o.size).sum();
        let sxy: f64 = compute.iter().map(|o| o.size * o.measured_seconds).sum();
        if !(sxx > 0.0) {
            return Err(degenerate("all sizes are zero"));
        }
        out.compute_coeff = sxy / sxx;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Minimize time to first token.
    Ttft,
    /// Minimize inter-token latency.
    Itl,
    /// Maximize throughput.
    Throughput,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ttft => "ttft",
            Objective::Itl => "itl",
            Objective::Throughput => "throughput",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ttft" => Ok(Objective::Ttft),
            "itl" => Ok(Objective::Itl),
            "throughput" | "theta" => Ok(Objective::Throughput),
            other => Err(format!("unknown objective '{other}' (expected ttft, itl or throughput)")),
        }
    }
}

impl Objective {
    /// The value to minimize, or `None` when the estimate has no value for it.
    pub fn score(self, est: &CostEstimate) -> Option<f64> {
        match self {
            Objective::Ttft => est.ttft,
            Objective::Itl => Some(est.itl),
            Objective::Throughput => est.theta.map(|t| -t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectOptions {
    pub max_ttft: Option<f64>,
    pub max_itl: Option<f64>,
    /// Restricts scoring to these strategies instead of the full enumeration.
    pub candidates: Option<Vec<ParallelStrategy>>,
    /// Keeps strategies that exceed device memory, ranked after all others.
    pub include_infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub strategy: ParallelStrategy,
    pub label: String,
    pub estimate: CostEstimate,
    pub memory_feasible: bool,
    pub required_bytes: f64,
    pub stable: bool,
    pub dp_ep: DpEpRelation,
}

impl RankedEntry {
    pub fn score(&self, objective: Objective) -> Option<f64> {
        objective.score(&self.estimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedStrategies {
    pub objective: Objective,
    pub tie_break: String,
    pub method: String,
    pub ar_literal: bool,
    pub tau_literal: bool,
    pub entries: Vec<RankedEntry>,
    pub excluded_memory: usize,
    pub excluded_slo: usize,
    pub bundle: ConfigBundle,
}

impl RankedStrategies {
    pub fn top(&self) -> &RankedEntry {
        &self.entries[0]
    }
}

/// Tier (stable, saturated, over memory) and the value ordered within it.
fn rank_key(e: &RankedEntry, objective: Objective) -> (u8, f64) {
    match (e.memory_feasible, e.stable, e.score(objective)) {
        (false, _, _) => (2, e.required_bytes),
        (true, true, Some(v)) => (0, v),
        _ => (1, e.estimate.rho),
    }
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Stable entries by objective value, then saturated entries by utilization.
/// Values within [`TIE_TOLERANCE`] of the first member of their run are
/// treated as tied and ordered by label.
fn rank(entries: &mut [RankedEntry], objective: Objective) {
    let key = |e: &RankedEntry| rank_key(e, objective);
    entries.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut start = 0;
    while start < entries.len() {
        let head = key(&entries[start]);
        let mut end = start + 1;
        while end < entries.len() {
            let k = key(&entries[end]);
            if k.0 != head.0 || !near(k.1, head.1) {
                break;
            }
            end += 1;
        }
        entries[start..end].sort_by(|a, b| a.label.cmp(&b.label));
        start = end;
    }
}

fn slo_ok(est: &CostEstimate, options: &SelectOptions) -> bool {
    let ttft_ok = options.max_ttft.map_or(true, |m| est.ttft.is_some_and(|t| t <= m));
    let itl_ok = options.max_itl.map_or(true, |m| est.itl <= m);
    ttft_ok && itl_ok
}

/// Scores every memory-feasible strategy and ranks for `objective`.
pub fn select_strategy(
    bundle: &ConfigBundle,
    objective: Objective,
    options: &SelectOptions,
) -> Result<RankedStrategies, AnalyzerError> {
    let ConfigBundle {
        model,
        cluster,
        workload,
        calibration,
    } = bundle;
    let pool = match &options.candidates {
        Some(list) => list
            .iter()
            .cloned()
            .map(|s| s.bind(cluster))
            .collect::<Result<Vec<_>, _>>()?,
        None => enumerate_strategies(cluster, model),
    };

    let scored: Vec<Result<Option<RankedEntry>, AnalyzerError>> = pool
        .par_iter()
        .map(|s| {
            let verdict = check_memory(s, model, cluster, workload);
            if !verdict.feasible && !options.include_infeasible {
                return Ok(None);
            }
            let estimate = indicators(s, model, workload, cluster, calibration)?;
            Ok(Some(RankedEntry {
                label: s.to_string(),
                strategy: s.clone(),
                stable: estimate.stable,
                estimate,
                memory_feasible: verdict.feasible,
                required_bytes: verdict.required_bytes,
                dp_ep: classify_dp_ep(s)?.case,
            }))
        })
        .collect();

    let mut feasible = Vec::new();
    for r in scored {
        if let Some(e) = r? {
            feasible.push(e);
        }
    }
    let excluded_memory = pool.len() - feasible.len();
    if feasible.is_empty() {
        return Err(AnalyzerError::NoFeasibleStrategy(format!(
            "all {} strategies exceed {} bytes per device",
            pool.len(),
            cluster.mem_per_device
        )));
    }
    let before = feasible.len();
    let mut entries: Vec<RankedEntry> = feasible
        .into_iter()
        .filter(|e| slo_ok(&e.estimate, options))
        .collect();
    let excluded_slo = before - entries.len();
    if entries.is_empty() {
        return Err(AnalyzerError::NoFeasibleStrategy(format!(
            "{before} memory-feasible strategies all violate the latency limits"
        )));
    }
    rank(&mut entries, objective);
    Ok(RankedStrategies {
        objective,
        tie_break: "values within 1e-12 relative are tied; ties go to the lexicographically smallest strategy".into(),
        method: METHOD_NOTE.into(),
        ar_literal: calibration.ar_literal,
        tau_literal: calibration.tau_literal,
        entries,
        excluded_memory,
        excluded_slo,
        bundle: bundle.clone(),
    })
}

/// Stable entries not dominated in (TTFT, ITL, throughput), in ranking order.
pub fn pareto_front(ranked: &RankedStrategies) -> Vec<&RankedEntry> {
    let pts: Vec<(&RankedEntry, [f64; 3])> = ranked
        .entries
        .iter()
        .filter_map(|e| match (e.estimate.ttft, e.estimate.theta) {
            (Some(t), Some(th)) => Some((e, [t, e.estimate.itl, -th])),
            _ => None,
        })
        .collect();
    let dominates = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).all(|(x, y)| x <= y) && a != b;
    pts.iter()
        .filter(|(_, p)| !pts.iter().any(|(_, q)| dominates(q, p)))
        .map(|(e, _)| *e)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub rank: usize,
    pub strategy: String,
    pub stable: bool,
    pub ttft: Option<f64>,
    pub itl: f64,
    pub theta: Option<f64>,
    pub rho: f64,
    pub memory_feasible: bool,
    pub required_bytes: f64,
    pub breakdown: BTreeMap<String, f64>,
}

/// Per-layer communication of the TP+EP baseline layout against the hybrid
/// intra-node TP + inter-node EP layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaComparison {
    pub ep_strategy: String,
    pub mix_strategy: String,
    pub lambda_ep: f64,
    pub lambda_mix: f64,
    pub ep_inter_a2a_bytes: f64,
    pub mix_inter_a2a_bytes: f64,
    pub mix_ag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub objective: Objective,
    pub method: String,
    pub tie_break: String,
    pub ar_literal: bool,
    pub tau_literal: bool,
    pub rows: Vec<ReportRow>,
    pub lambda_comparison: Option<LambdaComparison>,
}

/// The canonical baseline and hybrid strategies: attention TP inside each
/// node, MoE either pure EP across all devices or TP inside a node and EP
/// across nodes.
pub fn canonical_pair(n_node: u64, n_proc: u64) -> (String, String) {
    let attn = if n_node > 1 {
        format!("TP={n_proc} + DP={n_node}")
    } else {
        format!("TP={n_proc}")
    };
    let ep = format!("{attn}, EP={}", n_node * n_proc);
    let mix = if n_node > 1 {
        format!("{attn}, TP={n_proc} + EP={n_node}")
    } else {
        format!("{attn}, TP={n_proc}")
    };
    (ep, mix)
}

fn canonical_label(text: &str, ranked: &RankedStrategies) -> Option<String> {
    parse_strategy(text)
        .ok()?
        .bind(&ranked.bundle.cluster)
        .ok()
        .map(|s| s.to_string())
}

fn layer_breakdown(prefix: &str, lc: &LayerComm, map: &mut BTreeMap<String, f64>) {
    map.insert(format!("{prefix}.ar"), lc.ar);
    map.insert(format!("{prefix}.ag"), lc.ag);
    map.insert(format!("{prefix}.a2a"), lc.a2a);
    map.insert(format!("{prefix}.total"), lc.total);
}

pub fn compare_report(ranked: &RankedStrategies, top_n: usize) -> ComparisonReport {
    let rows = ranked
        .entries
        .iter()
        .take(top_n)
        .enumerate()
        .map(|(i, e)| ReportRow {
            rank: i + 1,
            strategy: e.label.clone(),
            stable: e.stable,
            ttft: e.estimate.ttft,
            itl: e.estimate.itl,
            theta: e.estimate.theta,
            rho: e.estimate.rho,
            memory_feasible: e.memory_feasible,
            required_bytes: e.required_bytes,
            breakdown: e.estimate.breakdown.clone(),
        })
        .collect();

    let c = &ranked.bundle.cluster;
    let (ep_text, mix_text) = canonical_pair(c.n_node, c.n_proc);
    let lambda_comparison = match (canonical_label(&ep_text, ranked), canonical_label(&mix_text, ranked)) {
        (Some(ep), Some(mix)) if ep != mix => {
            let b = &ranked.bundle;
            let base = lambda_ep_baseline(&b.model, &b.workload, &b.cluster, &b.calibration);
            let hybrid = lambda_mix(&b.model, &b.workload, &b.cluster, &b.calibration);
            let mut scratch = BTreeMap::new();
            layer_breakdown("ep", &base, &mut scratch);
            layer_breakdown("mix", &hybrid, &mut scratch);
            log::debug!("lambda comparison terms: {scratch:?}");
            Some(LambdaComparison {
                ep_strategy: ep,
                mix_strategy: mix,
                lambda_ep: base.total,
                lambda_mix: hybrid.total,
                ep_inter_a2a_bytes: base.a2a_bytes,
                mix_inter_a2a_bytes: hybrid.a2a_bytes,
                mix_ag: hybrid.ag,
            })
        }
        _ => None,
    };

    ComparisonReport {
        objective: ranked.objective,
        method: ranked.method.clone(),
        tie_break: ranked.tie_break.clone(),
        ar_literal: ranked.ar_literal,
        tau_literal: ranked.tau_literal,
        rows,
        lambda_comparison,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "saturated".to_string(), |x| format!("{x:.6e}"))
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per strategy.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# objective: {}\n", self.objective));
        out.push_str(&format!("# method: {}\n", self.method));
        out.push_str(&format!(
            "# ar_literal: {}, tau_literal: {}\n",
            self.ar_literal, self.tau_literal
        ));
        let width = self.rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
        out.push_str(&format!(
            "{:>4}  {:<width$}  {:>14}  {:>14}  {:>14}  {:>10}  {:>6}\n",
            "rank", "strategy", "ttft_s", "itl_s", "theta_tok_s", "rho", "fits"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>4}  {:<width$}  {:>14}  {:>14.6e}  {:>14}  {:>10.4e}  {:>6}\n",
                r.rank,
                r.strategy,
                opt(r.ttft),
                r.itl,
                opt(r.theta),
                r.rho,
                if r.memory_feasible { "yes" } else { "no" }
            ));
        }
        if let Some(l) = &self.lambda_comparison {
            out.push_str(&format!(
                "lambda_ep [{}] = {:.6e} s, lambda_mix [{}] = {:.6e} s, inter A2A bytes {:.6e} -> {:.6e}\n",
                l.ep_strategy, l.lambda_ep, l.mix_strategy, l.lambda_mix, l.ep_inter_a2a_bytes, l.mix_inter_a2a_bytes
            ));
        }
        out
    }
}

/// Relative ordering between two entries under the ranking rules.
pub fn ranking_cmp(a: &RankedEntry, b: &RankedEntry, objective: Objective) -> Ordering {
    let (ka, kb) = (rank_key(a, objective), rank_key(b, objective));
    ka.0.cmp(&kb.0)
        .then_with(|| {
            if near(ka.1, kb.1) {
                Ordering::Equal
            } else {
                ka.1.total_cmp(&kb.1)
            }
        })
        .then_with(|| a.label.cmp(&b.label))
}
