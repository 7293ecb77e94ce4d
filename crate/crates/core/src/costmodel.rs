//! Analytic cost model: collective costs under an alpha-beta link model,
//! per-layer compute and communication latency, per-token service latency,
//! M/M/1 queuing, and the TTFT / ITL / throughput indicators.
//!
//! Every size handed to a cost function is in bytes. Every returned value is
//! in seconds, except throughput (tokens per second).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CalibrationCoefficients, ClusterConfig, ModelHyperparams, WorkloadSpec};
use crate::strategy::{classify_dp_ep, ParallelStrategy, Scope, StrategyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("queue saturated: rho = {rho} >= 1")]
    Saturated { rho: f64 },
    #[error("service latency must be positive, got {0}")]
    NonPositiveService(f64),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Latency `alpha` (seconds per message) and bandwidth `beta` (bytes per second).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkClass {
    pub alpha: f64,
    pub beta: f64,
}

impl LinkClass {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    /// Time to move `bytes` in one message.
    pub fn transfer(&self, bytes: f64) -> f64 {
        self.alpha + bytes / self.beta
    }
}

/// The intra-node and inter-node link classes in effect for a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Links {
    pub intra: LinkClass,
    pub inter: LinkClass,
}

impl Links {
    pub fn resolve(cluster: &ClusterConfig, calib: &CalibrationCoefficients) -> Self {
        let intra = calib
            .intra
            .map(|o| LinkClass::new(o.alpha, o.beta))
            .unwrap_or(LinkClass::new(cluster.intra_alpha, cluster.intra_beta));
        let inter = calib
            .inter
            .map(|o| LinkClass::new(o.alpha, o.beta))
            .unwrap_or(LinkClass::new(cluster.inter_alpha, cluster.inter_beta));
        Self { intra, inter }
    }

    /// A group that stays inside a node uses the intra link; anything that
    /// crosses nodes is charged entirely at the inter link.
    pub fn for_scope(&self, scope: Scope) -> LinkClass {
        if scope.crosses_nodes() {
            self.inter
        } else {
            self.intra
        }
    }
}

/// Reduce-scatter, one round of `size / degree` bytes.
pub fn rs_cost(size: f64, degree: u64, link: LinkClass) -> f64 {
    if degree <= 1 {
        return 0.0;
    }
    link.transfer(size / degree as f64)
}

/// All-gather; same cost as reduce-scatter.
pub fn ag_cost(size: f64, degree: u64, link: LinkClass) -> f64 {
    rs_cost(size, degree, link)
}

/// All-reduce composed as `RS(size/degree) + AG(size/degree)`.
pub fn ar_cost(size: f64, degree: u64, link: LinkClass) -> f64 {
    ar_cost_with(size, degree, link, true)
}

/// All-reduce; `literal = false` composes `RS(size) + AG(size)` instead.
pub fn ar_cost_with(size: f64, degree: u64, link: LinkClass, literal: bool) -> f64 {
    if degree <= 1 {
        return 0.0;
    }
    let part = if literal { size / degree as f64 } else { size };
    rs_cost(part, degree, link) + ag_cost(part, degree, link)
}

/// Pairwise all-to-all: `degree - 1` rounds of `size / degree` bytes.
pub fn a2a_cost(size: f64, degree: u64, link: LinkClass) -> f64 {
    if degree <= 1 {
        return 0.0;
    }
    (degree - 1) as f64 * link.transfer(size / degree as f64)
}

pub fn p2p_cost(size: f64, link: LinkClass) -> f64 {
    link.transfer(size)
}

/// Per-rank, per-layer compute latency at sequence length `seq`.
///
/// `c_tau * psi_active / (d_TP * d_EP) * (b / d_DP) * seq`, where `d_TP` is the
/// MoE-block TP degree. With `tau_literal` the hidden dimension multiplies in
/// as well.
pub fn compute_latency_at(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    calib: &CalibrationCoefficients,
    seq: u64,
) -> f64 {
    let shard = model.psi_active / (strategy.moe_tp() * strategy.d_ep()) as f64;
    let tokens = workload.batch_size as f64 / strategy.d_dp() as f64 * seq as f64;
    let h = if calib.tau_literal {
        model.hidden_dim as f64
    } else {
        1.0
    };
    calib.compute_coeff * shard * tokens * h
}

pub fn compute_latency(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    calib: &CalibrationCoefficients,
) -> f64 {
    compute_latency_at(strategy, model, workload, calib, workload.seq_len)
}

/// The terms of the per-layer communication latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommBreakdown {
    pub ar_attn: f64,
    pub ar_moe: f64,
    pub a2a_dispatch: f64,
    pub a2a_combine: f64,
    /// Size of one A2A group.
    pub a2a_group: u64,
    /// Requests per A2A group member: `b / d_DP`, or `b / d_EP` once redundancy is dropped.
    pub a2a_batch: f64,
    pub a2a_bytes: f64,
}

impl CommBreakdown {
    pub fn total(&self) -> f64 {
        self.ar_attn + self.ar_moe + self.a2a_dispatch + self.a2a_combine
    }
}

pub fn comm_breakdown_at(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
    seq: u64,
) -> Result<CommBreakdown, CostError> {
    classify_dp_ep(strategy)?;
    let links = Links::resolve(cluster, calib);
    let b = workload.batch_size as f64;
    let row_bytes = seq as f64 * model.hidden_dim as f64 * model.bytes_per_element as f64;
    let (d_dp, d_ep) = (strategy.d_dp(), strategy.d_ep());

    let ar_bytes = b / d_dp as f64 * row_bytes;
    let ar_attn = ar_cost_with(
        ar_bytes,
        strategy.attn_tp(),
        links.for_scope(strategy.attn_tp_scope(cluster)),
        calib.ar_literal,
    );
    let ar_moe = ar_cost_with(
        ar_bytes,
        strategy.moe_tp(),
        links.for_scope(strategy.moe_tp_scope(cluster)),
        calib.ar_literal,
    );

    let (a2a_group, scope) = strategy.a2a_group(cluster);
    let a2a_batch = if d_dp >= d_ep { b / d_dp as f64 } else { b / d_ep as f64 };
    let a2a_bytes = a2a_batch * row_bytes * model.top_k as f64;
    let a2a = a2a_cost(a2a_bytes, a2a_group, links.for_scope(scope));
    Ok(CommBreakdown {
        ar_attn,
        ar_moe,
        a2a_dispatch: a2a,
        a2a_combine: a2a,
        a2a_group,
        a2a_batch,
        a2a_bytes,
    })
}

/// Per-rank, per-layer communication latency at the workload sequence length.
pub fn comm_latency(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
) -> Result<f64, CostError> {
    Ok(comm_breakdown_at(strategy, model, workload, cluster, calib, workload.seq_len)?.total())
}

/// Pipeline stage-to-stage transfer time, summed over the `d_pp - 1` hops.
pub fn pipeline_p2p_at(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
    seq: u64,
) -> f64 {
    let links = Links::resolve(cluster, calib);
    let bytes = workload.batch_size as f64 / strategy.d_dp() as f64
        * seq as f64
        * model.hidden_dim as f64
        * model.bytes_per_element as f64;
    strategy
        .pp_hop_scopes(cluster)
        .into_iter()
        .map(|scope| p2p_cost(bytes, links.for_scope(scope)))
        .sum()
}

/// Service latency components for one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServiceTerms {
    pub seq: u64,
    pub tau: f64,
    pub comm: CommBreakdown,
    pub p2p: f64,
    pub svc: f64,
}

pub fn service_terms(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
    seq: u64,
) -> Result<ServiceTerms, CostError> {
    let tau = compute_latency_at(strategy, model, workload, calib, seq);
    let comm = comm_breakdown_at(strategy, model, workload, cluster, calib, seq)?;
    let p2p = pipeline_p2p_at(strategy, model, workload, cluster, calib, seq);
    let svc = model.num_layers as f64 * (tau + comm.total()) + p2p;
    Ok(ServiceTerms {
        seq,
        tau,
        comm,
        p2p,
        svc,
    })
}

/// Service latency of one token through all decoder layers, with the
/// sequence length replaced by `seq`.
pub fn svc_latency(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
    seq: u64,
) -> Result<f64, CostError> {
    Ok(service_terms(strategy, model, workload, cluster, calib, seq)?.svc)
}

/// M/M/1 expected waiting time for arrival rate `arrival` and service time `svc`.
pub fn queuing_delay(arrival: f64, svc: f64) -> Result<f64, CostError> {
    if !(svc > 0.0) {
        return Err(CostError::NonPositiveService(svc));
    }
    let rho = arrival * svc;
    if rho >= 1.0 {
        return Err(CostError::Saturated { rho });
    }
    let mu = 1.0 / svc;
    Ok(arrival / (mu * (mu - arrival)))
}

/// Predicted indicators for one strategy.
///
/// `tau`, `lambda_comm` and `p2p` are the prefill (`s = L_in`) values; the
/// decode values are in `breakdown` under the `decode.` prefix. The queue is
/// served at the steady-state per-token rate `1 / svc_decode`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub tau: f64,
    pub lambda_comm: f64,
    pub p2p: f64,
    pub svc_prefill: f64,
    pub svc_decode: f64,
    pub rho: f64,
    pub stable: bool,
    pub w_q: Option<f64>,
    pub ttft: Option<f64>,
    pub itl: f64,
    pub theta: Option<f64>,
    pub breakdown: BTreeMap<String, f64>,
}

fn record(map: &mut BTreeMap<String, f64>, prefix: &str, t: &ServiceTerms) {
    let entries = [
        ("seq", t.seq as f64),
        ("tau", t.tau),
        ("ar_attn", t.comm.ar_attn),
        ("ar_moe", t.comm.ar_moe),
        ("a2a_dispatch", t.comm.a2a_dispatch),
        ("a2a_combine", t.comm.a2a_combine),
        ("a2a_group", t.comm.a2a_group as f64),
        ("a2a_batch", t.comm.a2a_batch),
        ("a2a_bytes", t.comm.a2a_bytes),
        ("lambda", t.comm.total()),
        ("p2p", t.p2p),
        ("svc", t.svc),
    ];
    for (name, v) in entries {
        map.insert(format!("{prefix}.{name}"), v);
    }
}

pub fn indicators(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
) -> Result<CostEstimate, CostError> {
    let prefill = service_terms(strategy, model, workload, cluster, calib, workload.input_len)?;
    let decode = service_terms(strategy, model, workload, cluster, calib, 1)?;
    let rho = workload.arrival_rate * decode.svc;
    let w_q = match queuing_delay(workload.arrival_rate, decode.svc) {
        Ok(w) => Some(w),
        Err(CostError::Saturated { .. }) => None,
        Err(e) => return Err(e),
    };
    let l_in = workload.input_len as f64;
    let l_out = workload.output_len as f64;
    let ttft = w_q.map(|w| w + prefill.svc);
    let theta = w_q.map(|w| (l_in + l_out) / (w + prefill.svc + l_out * decode.svc));
    let mut breakdown = BTreeMap::new();
    record(&mut breakdown, "prefill", &prefill);
    record(&mut breakdown, "decode", &decode);
    breakdown.insert("rho".into(), rho);
    if let Some(w) = w_q {
        breakdown.insert("w_q".into(), w);
    }
    Ok(CostEstimate {
        tau: prefill.tau,
        lambda_comm: prefill.comm.total(),
        p2p: prefill.p2p,
        svc_prefill: prefill.svc,
        svc_decode: decode.svc,
        rho,
        stable: w_q.is_some(),
        w_q,
        ttft,
        itl: decode.svc,
        theta,
        breakdown,
    })
}

/// Per-layer communication of a TP-attention / EP-MoE layout or of the
/// hybrid intra-node TP + inter-node EP layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerComm {
    pub ar: f64,
    pub ag: f64,
    /// One A2A (dispatch or combine).
    pub a2a: f64,
    /// Bytes entering one inter-node A2A.
    pub a2a_bytes: f64,
    pub total: f64,
}

fn full_batch_bytes(model: &ModelHyperparams, workload: &WorkloadSpec) -> f64 {
    (workload.batch_size * workload.seq_len * model.hidden_dim * model.bytes_per_element) as f64
}

/// `AR(bsh, n_proc) + 2 * A2A(bshk, n_node)`.
pub fn lambda_ep_baseline(
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
) -> LayerComm {
    let links = Links::resolve(cluster, calib);
    let bsh = full_batch_bytes(model, workload);
    let a2a_bytes = bsh * model.top_k as f64;
    let ar = ar_cost_with(bsh, cluster.n_proc, links.intra, calib.ar_literal);
    let a2a = a2a_cost(a2a_bytes, cluster.n_node, links.inter);
    LayerComm {
        ar,
        ag: 0.0,
        a2a,
        a2a_bytes,
        total: ar + 2.0 * a2a,
    }
}

/// `AR(bsh, n_proc) + AG(bshk / n_proc, n_proc) + 2 * A2A(bshk / n_proc, n_node)`.
pub fn lambda_mix(
    model: &ModelHyperparams,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
) -> LayerComm {
    let links = Links::resolve(cluster, calib);
    let bsh = full_batch_bytes(model, workload);
    let a2a_bytes = bsh * model.top_k as f64 / cluster.n_proc as f64;
    let ar = ar_cost_with(bsh, cluster.n_proc, links.intra, calib.ar_literal);
    let ag = ag_cost(a2a_bytes, cluster.n_proc, links.intra);
    let a2a = a2a_cost(a2a_bytes, cluster.n_node, links.inter);
    LayerComm {
        ar,
        ag,
        a2a,
        a2a_bytes,
        total: ar + ag + 2.0 * a2a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::parse_strategy;
    use proptest::prelude::*;

    const GIG: LinkClass = LinkClass { alpha: 0.0, beta: 1e9 };

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    // 2x2 cluster fixture shared by the term-by-term oracles below.
    fn fixture() -> (ModelHyperparams, ClusterConfig, WorkloadSpec, CalibrationCoefficients) {
        let model = ModelHyperparams {
            hidden_dim: 4,
            num_layers: 2,
            top_k: 2,
            num_routed_experts: 4,
            num_shared_experts: 1,
            psi_attn: 1e6,
            psi_moe: 1e6,
            psi_active: 1e6,
            bytes_per_element: 2,
        };
        let cluster = ClusterConfig {
            n_node: 2,
            n_proc: 2,
            intra_alpha: 1e-6,
            intra_beta: 1e9,
            inter_alpha: 2e-6,
            inter_beta: 2.5e8,
            mem_per_device: 1e9,
            compute_rate: 1e12,
        };
        let workload = WorkloadSpec {
            batch_size: 4,
            seq_len: 8,
            input_len: 8,
            output_len: 4,
            arrival_rate: 1000.0,
        };
        let calib = CalibrationCoefficients::defaults_for(&cluster);
        (model, cluster, workload, calib)
    }

    #[test]
    fn collectives_degenerate_at_degree_one() {
        for size in [0.0, 1.0, 1e9] {
            let link = LinkClass::new(1e-3, 1.0);
            assert_eq!(rs_cost(size, 1, link), 0.0);
            assert_eq!(ag_cost(size, 1, link), 0.0);
            assert_eq!(ar_cost(size, 1, link), 0.0);
            assert_eq!(a2a_cost(size, 1, link), 0.0);
        }
    }

    #[test]
    fn hand_arithmetic_examples() {
        assert!(close(rs_cost(8192.0, 4, GIG), 2048.0 / 1e9));
        assert!(close(rs_cost(8192.0, 4, GIG), 2.048e-6));
        assert!(close(ar_cost(8192.0, 2, GIG), 2.0 * (4096.0 / 2.0) / 1e9));
        assert!(close(ar_cost(8192.0, 2, GIG), 4.096e-6));
        assert!(close(a2a_cost(1024.0, 4, GIG), 3.0 * 256.0 / 1e9));
        assert!(close(a2a_cost(1024.0, 4, GIG), 768e-9));
        assert!(close(p2p_cost(1e6, LinkClass::new(1e-6, 1e9)), 1.001e-3));
        assert_eq!(p2p_cost(0.0, GIG), 0.0);
        assert_eq!(rs_cost(8192.0, 8, GIG) * 2.0, rs_cost(8192.0, 4, GIG));
    }

    #[test]
    fn ar_modes() {
        let link = LinkClass::new(1e-6, 1e9);
        // RS(size) + AG(size) = 2 (alpha + size/d/beta)
        assert!(close(ar_cost_with(8192.0, 2, link, false), 2.0 * (1e-6 + 4096.0 / 1e9)));
        assert!(ar_cost_with(8192.0, 2, link, true) < ar_cost_with(8192.0, 2, link, false));
    }

    #[test]
    fn compute_latency_direct_substitution() {
        let (mut model, cluster, mut workload, mut calib) = fixture();
        model.psi_active = 100.0;
        workload.batch_size = 1;
        workload.seq_len = 1;
        calib.compute_coeff = 1e-12;
        let c = cluster_of(1, 1, &cluster);
        let s = parse_strategy("TP=1, EP=1").unwrap().bind(&c).unwrap();
        assert!(close(compute_latency(&s, &model, &workload, &calib), 1e-10));
        calib.tau_literal = true;
        assert!(close(compute_latency(&s, &model, &workload, &calib), 4e-10));
    }

    fn cluster_of(n_node: u64, n_proc: u64, base: &ClusterConfig) -> ClusterConfig {
        ClusterConfig {
            n_node,
            n_proc,
            ..base.clone()
        }
    }

    #[test]
    fn compute_latency_scales_with_degrees() {
        let (model, _, workload, calib) = fixture();
        // Formula-level check; the strategies are not bound to a cluster.
        let tau = |s: &str| compute_latency(&parse_strategy(s).unwrap(), &model, &workload, &calib);
        assert!(close(tau("TP=2 + DP=2, TP=4 + EP=2"), tau("TP=2 + DP=2, TP=2 + EP=2") / 2.0));
        assert!(close(tau("TP=2 + DP=4, TP=2 + EP=2"), tau("TP=2 + DP=2, TP=2 + EP=2") / 2.0));
        assert!(close(tau("TP=2 + DP=2, TP=2 + EP=4"), tau("TP=2 + DP=2, TP=2 + EP=2") / 2.0));
    }

    #[test]
    fn comm_latency_term_by_term_oracle() {
        let (model, cluster, workload, calib) = fixture();
        let s = parse_strategy("TP=2 + DP=2, TP=2 + EP=2").unwrap().bind(&cluster).unwrap();
        // b/d_DP = 2 requests, s = 8, h = 4, 2 bytes -> 128 B into each AR
        // AR literal: 2 * (1e-6 + (128/2/2)/1e9) on the intra link, once per block
        let ar = 2.0 * (1e-6 + 32.0 / 1e9);
        // A2A: d_DP >= d_EP, 256 B (k = 2), group 2 spread over both nodes
        let a2a = 1.0 * (2e-6 + 128.0 / 2.5e8);
        let oracle = 2.0 * ar + 2.0 * a2a;
        assert!(close(oracle, 9.152e-6));
        let got = comm_latency(&s, &model, &workload, &cluster, &calib).unwrap();
        assert!(close(got, oracle), "{got} vs {oracle}");
        let bd = comm_breakdown_at(&s, &model, &workload, &cluster, &calib, 8).unwrap();
        assert!(close(bd.ar_attn, ar) && close(bd.ar_moe, ar));
        assert!(close(bd.a2a_dispatch, a2a) && close(bd.a2a_combine, a2a));
        assert_eq!(bd.a2a_group, 2);
    }

    #[test]
    fn comm_degenerate_on_single_device() {
        let (model, cluster, workload, calib) = fixture();
        let c = cluster_of(1, 1, &cluster);
        let s = parse_strategy("TP=1, EP=1").unwrap().bind(&c).unwrap();
        assert_eq!(comm_latency(&s, &model, &workload, &c, &calib).unwrap(), 0.0);
    }

    #[test]
    fn dp_less_drops_redundancy() {
        let (model, cluster, workload, calib) = fixture();
        let c = ClusterConfig {
            intra_beta: 1e9,
            inter_beta: 1e9,
            intra_alpha: 0.0,
            inter_alpha: 0.0,
            ..cluster_of(2, 4, &cluster)
        };
        let greater = parse_strategy("TP=2 + DP=4, TP=4 + EP=2").unwrap().bind(&c).unwrap();
        let less = parse_strategy("TP=4 + DP=2, TP=2 + EP=4").unwrap().bind(&c).unwrap();
        let g = comm_breakdown_at(&greater, &model, &workload, &c, &calib, 8).unwrap();
        let l = comm_breakdown_at(&less, &model, &workload, &c, &calib, 8).unwrap();
        assert_eq!((g.a2a_group, l.a2a_group), (2, 2));
        assert_eq!(g.a2a_batch, 4.0 / 4.0);
        assert_eq!(l.a2a_batch, 4.0 / 4.0);
        // Without the drop the DP=2 side would carry b/d_DP = 2 requests.
        assert!(l.a2a_batch < workload.batch_size as f64 / less.d_dp() as f64);
        assert!(close(g.a2a_dispatch, l.a2a_dispatch));
    }

    #[test]
    fn service_latency_structure() {
        let (model, cluster, workload, calib) = fixture();
        let c = cluster_of(1, 1, &cluster);
        let mut m = model.clone();
        m.num_layers = 1;
        let s = parse_strategy("TP=1, EP=1").unwrap().bind(&c).unwrap();
        let svc = svc_latency(&s, &m, &workload, &c, &calib, 8).unwrap();
        assert_eq!(svc, compute_latency_at(&s, &m, &workload, &calib, 8));
        m.num_layers = 2;
        let twice = svc_latency(&s, &m, &workload, &c, &calib, 8).unwrap();
        assert_eq!(twice, 2.0 * svc);
        assert_eq!(pipeline_p2p_at(&s, &m, &workload, &c, &calib, 8), 0.0);
    }

    #[test]
    fn pipeline_term_counts_hops() {
        let (model, cluster, workload, calib) = fixture();
        let s = parse_strategy("TP=1 [PP=4]").unwrap().bind(&cluster).unwrap();
        // 4 stages of one device on a 2x2 cluster: hops 0->1 intra, 1->2 inter, 2->3 intra.
        // P2P payload: b/d_DP * s * h * bytes = 4 * 8 * 4 * 2 = 256 B
        let oracle = 2.0 * (1e-6 + 256.0 / 1e9) + (2e-6 + 256.0 / 2.5e8);
        let got = pipeline_p2p_at(&s, &model, &workload, &cluster, &calib, 8);
        assert!(close(got, oracle));
    }

    #[test]
    fn queuing_closed_form() {
        assert_eq!(queuing_delay(0.0, 0.5).unwrap(), 0.0);
        assert!(close(queuing_delay(50.0, 0.01).unwrap(), 0.01));
        assert!(matches!(queuing_delay(100.0, 0.01), Err(CostError::Saturated { .. })));
        assert!(matches!(queuing_delay(200.0, 0.01), Err(CostError::Saturated { .. })));
        assert!(matches!(queuing_delay(1.0, 0.0), Err(CostError::NonPositiveService(_))));
    }

    #[test]
    fn indicators_match_independent_recomputation() {
        let (model, cluster, workload, calib) = fixture();
        let s = parse_strategy("TP=2 + DP=2, TP=2 + EP=2").unwrap().bind(&cluster).unwrap();
        let est = indicators(&s, &model, &workload, &cluster, &calib).unwrap();
        // prefill, s = L_in = 8: tau = 1e-12 * 1e6/4 * 2 * 8
        let tau_p = 4e-6;
        let lam_p = 2.0 * 2.0 * (1e-6 + 32.0 / 1e9) + 2.0 * (2e-6 + 128.0 / 2.5e8);
        let svc_p = 2.0 * (tau_p + lam_p);
        // decode, s = 1: 16 B per AR, 32 B per A2A
        let tau_d = 1e-12 * 1e6 / 4.0 * 2.0;
        let lam_d = 2.0 * 2.0 * (1e-6 + 4.0 / 1e9) + 2.0 * (2e-6 + 16.0 / 2.5e8);
        let svc_d = 2.0 * (tau_d + lam_d);
        assert!(close(svc_p, 2.6304e-5));
        assert!(close(svc_d, 1.7288e-5));
        let mu = 1.0 / svc_d;
        let wq = 1000.0 / (mu * (mu - 1000.0));
        assert!(close(est.tau, tau_p));
        assert!(close(est.lambda_comm, lam_p));
        assert!(close(est.svc_prefill, svc_p));
        assert!(close(est.svc_decode, svc_d));
        assert!(close(est.itl, svc_d));
        assert!(close(est.w_q.unwrap(), wq));
        assert!(close(est.ttft.unwrap(), wq + svc_p));
        assert!(close(est.theta.unwrap(), 12.0 / (wq + svc_p + 4.0 * svc_d)));
        assert!(est.stable);
        assert_eq!(est.breakdown["prefill.a2a_group"], 2.0);
        assert!(close(est.breakdown["decode.svc"], svc_d));
    }

    #[test]
    fn saturated_estimate_is_marked_not_failed() {
        let (model, cluster, mut workload, calib) = fixture();
        workload.arrival_rate = 1e9;
        let s = parse_strategy("TP=2 + DP=2, TP=2 + EP=2").unwrap().bind(&cluster).unwrap();
        let est = indicators(&s, &model, &workload, &cluster, &calib).unwrap();
        assert!(!est.stable);
        assert!(est.rho >= 1.0);
        assert_eq!((est.w_q, est.ttft, est.theta), (None, None, None));
    }

    #[test]
    fn throughput_tends_to_decode_limit() {
        let (model, cluster, mut workload, calib) = fixture();
        workload.arrival_rate = 0.0;
        let s = parse_strategy("TP=2 + DP=2, TP=2 + EP=2").unwrap().bind(&cluster).unwrap();
        workload.output_len = 1 << 30;
        let est = indicators(&s, &model, &workload, &cluster, &calib).unwrap();
        let limit = 1.0 / est.svc_decode;
        assert!((est.theta.unwrap() - limit).abs() / limit < 1e-6);
    }

    #[test]
    fn ttft_equals_itl_when_comm_and_queue_vanish() {
        let (model, cluster, mut workload, calib) = fixture();
        let c = cluster_of(1, 1, &cluster);
        workload.arrival_rate = 0.0;
        workload.input_len = 1;
        let s = parse_strategy("TP=1, EP=1").unwrap().bind(&c).unwrap();
        let est = indicators(&s, &model, &workload, &c, &calib).unwrap();
        assert_eq!(est.ttft.unwrap(), est.itl);
    }

    #[test]
    fn lambda_layouts_hand_arithmetic() {
        let (model, cluster, workload, calib) = fixture();
        // bsh = 4*8*4*2 = 256 B, bshk = 512 B
        let ar = 2.0 * (1e-6 + 256.0 / 2.0 / 2.0 / 1e9);
        let ep = ar + 2.0 * (2e-6 + 512.0 / 2.0 / 2.5e8);
        let mix = ar + (1e-6 + 256.0 / 2.0 / 1e9) + 2.0 * (2e-6 + 256.0 / 2.0 / 2.5e8);
        let got_ep = lambda_ep_baseline(&model, &workload, &cluster, &calib);
        let got_mix = lambda_mix(&model, &workload, &cluster, &calib);
        assert!(close(got_ep.total, ep));
        assert!(close(got_mix.total, mix));
        assert_eq!(got_mix.a2a_bytes * cluster.n_proc as f64, got_ep.a2a_bytes);
    }

    #[test]
    fn lambda_single_node_is_pure_ar() {
        let (model, cluster, workload, calib) = fixture();
        let c = cluster_of(1, 4, &cluster);
        let ep = lambda_ep_baseline(&model, &workload, &c, &calib);
        assert_eq!(ep.a2a, 0.0);
        assert_eq!(ep.total, ep.ar);
        let c1 = cluster_of(2, 1, &cluster);
        let mix = lambda_mix(&model, &workload, &c1, &calib);
        let base = lambda_ep_baseline(&model, &workload, &c1, &calib);
        assert_eq!(mix.total, base.total);
    }

    #[test]
    fn lambda_linear_in_batch_without_alpha() {
        let (model, cluster, mut workload, calib) = fixture();
        let c = ClusterConfig {
            intra_alpha: 0.0,
            inter_alpha: 0.0,
            ..cluster
        };
        let one = lambda_ep_baseline(&model, &workload, &c, &calib).total;
        workload.batch_size *= 3;
        let three = lambda_ep_baseline(&model, &workload, &c, &calib).total;
        assert!(close(three, 3.0 * one));
    }

    proptest! {
        #[test]
        fn costs_nonnegative_and_ar_is_literal_composition(
            size in 0.0f64..1e12, j in 0u32..8, alpha in 0.0f64..1e-3, beta in 1e3f64..1e12
        ) {
            let d = 1u64 << j;
            let link = LinkClass::new(alpha, beta);
            for v in [rs_cost(size, d, link), ag_cost(size, d, link), ar_cost(size, d, link), a2a_cost(size, d, link), p2p_cost(size, link)] {
                prop_assert!(v >= 0.0);
            }
            if d > 1 {
                let composed = rs_cost(size / d as f64, d, link) + ag_cost(size / d as f64, d, link);
                prop_assert_eq!(ar_cost(size, d, link), composed);
            }
            let no_alpha = LinkClass::new(0.0, beta);
            prop_assert!(ar_cost(size, d, no_alpha) <= 2.0 * rs_cost(size, d, no_alpha));
        }

        #[test]
        fn a2a_increasing_in_degree(size in 1.0f64..1e9, j in 1u32..8) {
            let d = 1u64 << j;
            prop_assert!(a2a_cost(size, d * 2, GIG) > a2a_cost(size, d, GIG));
        }

        #[test]
        fn a2a_piecewise_linear_in_size(a in 0.0f64..1e9, b in 0.0f64..1e9, j in 1u32..8) {
            let d = 1u64 << j;
            let link = LinkClass::new(1e-6, 1e9);
            let mid = a2a_cost((a + b) / 2.0, d, link);
            let avg = (a2a_cost(a, d, link) + a2a_cost(b, d, link)) / 2.0;
            prop_assert!((mid - avg).abs() <= 1e-9 * avg.max(1e-12));
        }

        #[test]
        fn wq_closed_form_grid(arrival in 0.0f64..1e4, svc in 1e-6f64..1.0) {
            let rho = arrival * svc;
            match queuing_delay(arrival, svc) {
                Ok(w) => {
                    prop_assert!(rho < 1.0);
                    prop_assert!(w >= 0.0);
                    let mu = 1.0 / svc;
                    let other_form = (rho / mu) / (1.0 - rho);
                    prop_assert!((w - other_form).abs() <= 1e-9 * w.max(1e-300));
                }
                Err(CostError::Saturated { .. }) => prop_assert!(rho >= 1.0),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn throughput_decreases_with_any_latency_component(extra in 1e-9f64..1e-6, which in 0usize..3) {
            let (model, cluster, workload, mut calib) = fixture();
            let s = parse_strategy("TP=2 + DP=2, TP=2 + EP=2").unwrap().bind(&cluster).unwrap();
            let base = indicators(&s, &model, &workload, &cluster, &calib).unwrap();
            let mut c2 = cluster.clone();
            match which {
                0 => calib.compute_coeff *= 1.0 + extra * 1e3,
                1 => c2.inter_alpha += extra,
                _ => c2.intra_alpha += extra,
            }
            let worse = indicators(&s, &model, &workload, &c2, &calib).unwrap();
            prop_assert!(worse.theta.unwrap() < base.theta.unwrap());
            prop_assert!(worse.ttft.unwrap() >= worse.w_q.unwrap());
            prop_assert_eq!(worse.itl, worse.svc_decode);
        }
    }
}
