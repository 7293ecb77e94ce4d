//! Deterministic in-process simulation of an `n`-node by `m`-device cluster
//! running the hybrid MoE block: attention TP inside a node with DP across
//! nodes, MoE TP inside a node with EP across nodes.
//!
//! Ranks are numbered node-major: rank `r` lives on node `r / m` with TP rank
//! `r % m`. Experts are assigned to nodes in contiguous blocks.
//!
//! Fused AG-Dispatch: each rank routes its node's tokens, keeps hidden slice
//! `r_TP`, and in round `i` sends the slice rows bound for node `node + i` to
//! the same TP rank there, i.e. global rank `(r + i*m) mod mn`. Received
//! slices are reassembled with one intra-node all-gather per remote source;
//! tokens whose experts live on the local node never leave it. Round counts:
//! `n - 1` inter-node exchanges and `n - 1` intra-node all-gathers per rank,
//! since local shards never move.
//!
//! Fused RS-Combine: for each destination node in turn (local first) the TP
//! group reduce-scatters the expert partials, applies the top-k weights and
//! sums rows per token; remote results go out in round `i` to the same TP
//! rank of node `node + i` while the next reduce-scatter runs. Each rank
//! accumulates its hidden slice of the output and a final all-gather
//! restores the full width. Round counts: `n - 1` inter-node exchanges and `n`
//! intra-node reduce-scatters per rank, plus one all-gather. Staged combine
//! buffers never exceed `n` slices of `tokens_per_node * h / m` values.

mod collectives;
mod experts;
mod router;
mod tensor;
mod trace;

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

pub use collectives::{pairwise_schedule, ref_all_gather, ref_all_reduce, ref_all_to_all_pairwise, ref_reduce_scatter, PairwiseStep};
pub use experts::ExpertSpec;
pub use router::RouterSpec;
pub use tensor::LogicalTensor;
pub use trace::{read_trace_csv, trace_csv_string, write_trace_csv, TraceParseError, EventSpec, Lane, Op, Phase, TraceBuilder, TraceEvent, TRACE_CSV_HEADER};

use crate::strategy::{parse_strategy, ParallelStrategy};

/// Relative tolerance for comparing simulated outputs against the oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("router, token {token}: {reason}")]
    Router { token: usize, reason: String },
    #[error("rank {rank} must receive {needed} rows but its buffer holds {capacity}")]
    Capacity { rank: usize, needed: usize, capacity: usize },
    #[error("unsupported layout: {0}")]
    Unsupported(String),
    #[error("message protocol violated: {0}")]
    Protocol(String),
    #[error("invalid cluster: {0}")]
    Cluster(String),
}

#[derive(Debug, Clone)]
struct Message {
    src: usize,
    round: usize,
    tag: &'static str,
    payload: LogicalTensor,
}

#[derive(Debug, Clone)]
pub struct SimRank {
    pub rank: usize,
    /// EP group index; the algorithms' notion of node.
    pub node: usize,
    pub tp_rank: usize,
    /// Physical node hosting the rank.
    pub phys_node: usize,
    inbox: VecDeque<Message>,
}

#[derive(Debug, Clone)]
pub struct SimCluster {
    pub n_node: usize,
    pub n_proc: usize,
    pub ranks: Vec<SimRank>,
}

pub fn build_cluster(n_node: usize, n_proc: usize) -> Result<SimCluster, SimError> {
    build_grid(n_node, n_proc, n_proc)
}

/// `n_node` EP groups of `n_proc` TP ranks laid out node-major over physical
/// nodes of `devices_per_node` devices. With `devices_per_node == n_proc`
/// this is [`build_cluster`].
pub fn build_grid(n_node: usize, n_proc: usize, devices_per_node: usize) -> Result<SimCluster, SimError> {
    if n_node == 0 || n_proc == 0 || devices_per_node == 0 {
        return Err(SimError::Cluster(format!(
            "sizes must be at least 1, got {n_node} x {n_proc} on {devices_per_node}-device nodes"
        )));
    }
    let ranks = (0..n_node * n_proc)
        .map(|r| SimRank {
            rank: r,
            node: r / n_proc,
            tp_rank: r % n_proc,
            phys_node: r / devices_per_node,
            inbox: VecDeque::new(),
        })
        .collect();
    Ok(SimCluster { n_node, n_proc, ranks })
}

impl SimCluster {
    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn rank_of(&self, node: usize, tp: usize) -> usize {
        node * self.n_proc + tp
    }

    /// TP group (all ranks of one node) in rank order.
    pub fn tp_group(&self, node: usize) -> Vec<usize> {
        (0..self.n_proc).map(|t| self.rank_of(node, t)).collect()
    }

    fn isend(&mut self, src: usize, dst: usize, round: usize, tag: &'static str, payload: LogicalTensor) {
        self.ranks[dst].inbox.push_back(Message {
            src,
            round,
            tag,
            payload,
        });
    }

    /// Takes the first message from `src` with the given round and tag.
    fn irecv(&mut self, dst: usize, src: usize, round: usize, tag: &'static str) -> Result<LogicalTensor, SimError> {
        let inbox = &mut self.ranks[dst].inbox;
        let pos = inbox
            .iter()
            .position(|m| m.src == src && m.round == round && m.tag == tag)
            .ok_or_else(|| SimError::Protocol(format!("rank {dst}: no {tag} message from {src} in round {round}")))?;
        Ok(inbox.remove(pos).expect("position is in range").payload)
    }

    fn assert_drained(&self) -> Result<(), SimError> {
        match self.ranks.iter().find(|r| !r.inbox.is_empty()) {
            Some(r) => Err(SimError::Protocol(format!(
                "rank {} holds {} undelivered messages",
                r.rank,
                r.inbox.len()
            ))),
            None => Ok(()),
        }
    }
}

/// One `(token, slot)` assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Assignment {
    pub token: usize,
    pub slot: usize,
    pub expert: usize,
    pub weight: f64,
}

/// Static dispatch layout precomputed from the routing table.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingPlan {
    pub n_node: usize,
    pub n_proc: usize,
    pub hidden: usize,
    pub tokens_per_node: usize,
    pub experts_per_node: usize,
    /// `sent[p][q]`: tokens of node `p` (ascending) with at least one expert on node `q`.
    pub sent: Vec<Vec<Vec<usize>>>,
    /// `pairs[p][q]`: assignments of node `p`'s tokens to experts on node `q`,
    /// ordered by token then slot.
    pub pairs: Vec<Vec<Vec<Assignment>>>,
}

impl RoutingPlan {
    pub fn new(n_node: usize, n_proc: usize, tokens: usize, hidden: usize, router: &RouterSpec) -> Result<Self, SimError> {
        if tokens % n_node != 0 {
            return Err(SimError::Shape(format!("{tokens} tokens do not split over {n_node} nodes")));
        }
        if hidden % n_proc != 0 {
            return Err(SimError::Shape(format!("hidden size {hidden} does not split over {n_proc} TP ranks")));
        }
        if router.num_tokens() != tokens {
            return Err(SimError::Shape(format!(
                "router covers {} tokens, input has {tokens}",
                router.num_tokens()
            )));
        }
        let e = router.num_experts();
        if e < n_node || e % n_node != 0 {
            return Err(SimError::Unsupported(format!(
                "{e} experts cannot be split evenly over {n_node} nodes"
            )));
        }
        let tokens_per_node = tokens / n_node;
        let experts_per_node = e / n_node;
        let mut sent = vec![vec![Vec::new(); n_node]; n_node];
        let mut pairs = vec![vec![Vec::new(); n_node]; n_node];
        for token in 0..tokens {
            let p = token / tokens_per_node;
            for (slot, &(expert, weight)) in router.route(token).iter().enumerate() {
                let q = expert / experts_per_node;
                pairs[p][q].push(Assignment {
                    token,
                    slot,
                    expert,
                    weight,
                });
                if sent[p][q].last() != Some(&token) {
                    sent[p][q].push(token);
                }
            }
        }
        Ok(Self {
            n_node,
            n_proc,
            hidden,
            tokens_per_node,
            experts_per_node,
            sent,
            pairs,
        })
    }

    pub fn owner(&self, expert: usize) -> usize {
        expert / self.experts_per_node
    }

    /// Receive-buffer rows each rank of node `q` needs for source node `p`.
    pub fn recv_rows(&self, p: usize, q: usize) -> usize {
        self.sent[p][q].len()
    }

    /// Static receive-buffer capacity: the largest row count in the table.
    pub fn static_capacity(&self) -> usize {
        self.sent.iter().flatten().map(Vec::len).max().unwrap_or(0)
    }

    fn slice_width(&self) -> usize {
        self.hidden / self.n_proc
    }

    fn local_row(&self, token: usize) -> usize {
        token % self.tokens_per_node
    }
}

/// `Y[t] = sum over the top-k experts of t, ascending by expert id, of w * Expert_e(X[t])`.
pub fn moe_oracle(x: &LogicalTensor, router: &RouterSpec, experts: &ExpertSpec) -> LogicalTensor {
    let h = x.cols();
    let mut y = LogicalTensor::zeros(x.rows(), h);
    for t in 0..x.rows() {
        let mut route = router.route(t).to_vec();
        route.sort_by_key(|&(e, _)| e);
        let out = y.row_mut(t);
        for (e, w) in route {
            for (o, v) in out.iter_mut().zip(experts.apply(e, x.row(t))) {
                *o += w * v;
            }
        }
    }
    y
}

/// Per-rank bookkeeping of auxiliary storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct RankStats {
    pub rank: usize,
    /// Peak values held in staged combine buffers.
    pub staged_peak_values: usize,
    /// Upper bound: `n_node` buffers of `tokens_per_node * hidden / n_proc` values.
    pub staged_bound_values: usize,
    /// Rows received during dispatch.
    pub dispatch_rows: usize,
    /// `(token, expert)` assignments computed by this rank.
    pub assignments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Mode {
    #[default]
    Fused,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    pub mode: Mode,
    /// Rows per dispatch receive buffer; defaults to the static table maximum.
    pub capacity: Option<usize>,
}

fn comm_lane(cluster: &SimCluster, a: usize, b: usize) -> Lane {
    if cluster.ranks[a].phys_node == cluster.ranks[b].phys_node {
        Lane::Intra
    } else {
        Lane::Inter
    }
}

/// A collective confined to one physical node uses the intra link, any
/// other the inter link.
fn group_lane(cluster: &SimCluster, group: &[usize]) -> Lane {
    let first = cluster.ranks[group[0]].phys_node;
    if group.iter().all(|&g| cluster.ranks[g].phys_node == first) {
        Lane::Intra
    } else {
        Lane::Inter
    }
}

/// Dispatch result on one rank: full-width rows per source node, for the
/// tokens listed in `plan.sent[source][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatched {
    pub by_source: Vec<LogicalTensor>,
}

struct Stage<T> {
    per_rank: Vec<T>,
    /// Events the next stage of each rank depends on.
    ready: Vec<Vec<usize>>,
}

fn route_events(cluster: &SimCluster, plan: &RoutingPlan, router: &RouterSpec, tb: &mut TraceBuilder) -> Vec<usize> {
    (0..cluster.size())
        .map(|r| {
            tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Route,
                    phase: Phase::Route,
                    peer: None,
                    group: vec![],
                    bytes: 0,
                    elems: (plan.tokens_per_node * router.num_experts()) as u64,
                    round: 0,
                    lane: Some(Lane::Compute),
                },
                [],
            )
        })
        .collect()
}

fn check_capacity(cluster: &SimCluster, plan: &RoutingPlan, options: &SimOptions) -> Result<(), SimError> {
    let capacity = options.capacity.unwrap_or_else(|| plan.static_capacity());
    for q in 0..cluster.n_node {
        for p in 0..cluster.n_node {
            let needed = plan.recv_rows(p, q);
            if p != q && needed > capacity {
                return Err(SimError::Capacity {
                    rank: cluster.rank_of(q, 0),
                    needed,
                    capacity,
                });
            }
        }
    }
    Ok(())
}

fn node_inputs(x: &LogicalTensor, plan: &RoutingPlan) -> Vec<LogicalTensor> {
    (0..plan.n_node)
        .map(|p| x.row_range(p * plan.tokens_per_node, (p + 1) * plan.tokens_per_node))
        .collect()
}

fn local_rows(plan: &RoutingPlan, p: usize, q: usize) -> Vec<usize> {
    plan.sent[p][q].iter().map(|&t| plan.local_row(t)).collect()
}

fn fused_dispatch_stage(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    x_nodes: &[LogicalTensor],
    route_ids: &[usize],
    tb: &mut TraceBuilder,
) -> Result<Stage<Dispatched>, SimError> {
    let (n, m) = (cluster.n_node, cluster.n_proc);
    let size = cluster.size();
    let slices: Vec<Vec<LogicalTensor>> = x_nodes.iter().map(|x| x.split_cols(m)).collect::<Result<_, _>>()?;
    let mut by_source: Vec<Vec<Option<LogicalTensor>>> = vec![vec![None; n]; size];
    for r in 0..size {
        let q = cluster.ranks[r].node;
        by_source[r][q] = Some(x_nodes[q].select_rows(&local_rows(plan, q, q)));
    }
    let mut ready: Vec<Vec<usize>> = route_ids.iter().map(|&id| vec![id]).collect();

    let mut recv_ids = vec![vec![0usize; n]; size];
    for i in 1..n {
        let mut send_ids = vec![0usize; size];
        for r in 0..size {
            let (j, t) = (cluster.ranks[r].node, cluster.ranks[r].tp_rank);
            let q = (j + i) % n;
            let to = (r + i * m) % size;
            let rows = slices[j][t].select_rows(&local_rows(plan, j, q));
            send_ids[r] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Isend,
                    phase: Phase::DispatchA2a,
                    peer: Some(to),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: Some(comm_lane(cluster, r, to)),
                },
                [route_ids[r]],
            );
            cluster.isend(r, to, i, "dispatch", rows);
        }
        let mut received = vec![None; size];
        for r in 0..size {
            let from = (r + size - i * m) % size;
            let rows = cluster.irecv(r, from, i, "dispatch")?;
            recv_ids[r][i] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Irecv,
                    phase: Phase::DispatchA2a,
                    peer: Some(from),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: None,
                },
                [send_ids[from]],
            );
            received[r] = Some(rows);
        }
        // Reassemble the full hidden width of the rows from node q - i.
        for q in 0..n {
            let p = (q + n - i) % n;
            let group = cluster.tp_group(q);
            let shards: Vec<LogicalTensor> = group.iter().map(|&g| received[g].take().expect("received")).collect();
            let full = ref_all_gather(&shards)?;
            let deps: Vec<usize> = group.iter().map(|&g| recv_ids[g][i]).collect();
            for (&g, rows) in group.iter().zip(full) {
                let id = tb.push(
                    EventSpec {
                        rank: g,
                        op: Op::AllGather,
                        phase: Phase::DispatchAg,
                        peer: None,
                        group: group.clone(),
                        bytes: rows.bytes(),
                        elems: 0,
                        round: i - 1,
                        lane: Some(group_lane(cluster, &group)),
                    },
                    deps.clone(),
                );
                ready[g].push(id);
                by_source[g][p] = Some(rows);
            }
        }
    }
    let per_rank = by_source
        .into_iter()
        .map(|v| Dispatched {
            by_source: v.into_iter().map(|t| t.expect("every source delivered")).collect(),
        })
        .collect();
    Ok(Stage { per_rank, ready })
}

fn baseline_dispatch_stage(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    x_nodes: &[LogicalTensor],
    route_ids: &[usize],
    tb: &mut TraceBuilder,
) -> Result<Stage<Dispatched>, SimError> {
    let (n, m) = (cluster.n_node, cluster.n_proc);
    let size = cluster.size();
    let mut by_source: Vec<Vec<Option<LogicalTensor>>> = vec![vec![None; n]; size];
    for r in 0..size {
        let q = cluster.ranks[r].node;
        by_source[r][q] = Some(x_nodes[q].select_rows(&local_rows(plan, q, q)));
    }
    let mut ready: Vec<Vec<usize>> = route_ids.iter().map(|&id| vec![id]).collect();
    for i in 1..n {
        let mut send_ids = vec![0usize; size];
        for r in 0..size {
            let j = cluster.ranks[r].node;
            let q = (j + i) % n;
            let to = (r + i * m) % size;
            let rows = x_nodes[j].select_rows(&local_rows(plan, j, q));
            send_ids[r] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Isend,
                    phase: Phase::DispatchA2a,
                    peer: Some(to),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: Some(comm_lane(cluster, r, to)),
                },
                [route_ids[r]],
            );
            cluster.isend(r, to, i, "dispatch", rows);
        }
        for r in 0..size {
            let from = (r + size - i * m) % size;
            let rows = cluster.irecv(r, from, i, "dispatch")?;
            let id = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Irecv,
                    phase: Phase::DispatchA2a,
                    peer: Some(from),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: None,
                },
                [send_ids[from]],
            );
            ready[r].push(id);
            by_source[r][cluster.ranks[from].node] = Some(rows);
        }
    }
    let per_rank = by_source
        .into_iter()
        .map(|v| Dispatched {
            by_source: v.into_iter().map(|t| t.expect("every source delivered")).collect(),
        })
        .collect();
    Ok(Stage { per_rank, ready })
}

/// Expert partials on each rank, indexed by source node: one full-width row
/// per assignment in `plan.pairs[source][node]`.
fn expert_stage(
    cluster: &SimCluster,
    plan: &RoutingPlan,
    dispatched: &Stage<Dispatched>,
    experts: &ExpertSpec,
    tb: &mut TraceBuilder,
) -> (Stage<Vec<LogicalTensor>>, Vec<usize>) {
    let (n, m, h) = (cluster.n_node, cluster.n_proc, plan.hidden);
    let mut per_rank = Vec::with_capacity(cluster.size());
    let mut ready = Vec::with_capacity(cluster.size());
    let mut counts = Vec::with_capacity(cluster.size());
    for r in 0..cluster.size() {
        let (q, t) = (cluster.ranks[r].node, cluster.ranks[r].tp_rank);
        let mut partials = Vec::with_capacity(n);
        let mut count = 0;
        for p in 0..n {
            let rows = &dispatched.per_rank[r].by_source[p];
            let sent = &plan.sent[p][q];
            let pairs = &plan.pairs[p][q];
            let mut out = LogicalTensor::zeros(pairs.len(), h);
            for (k, a) in pairs.iter().enumerate() {
                let idx = sent.binary_search(&a.token).expect("dispatched token");
                out.row_mut(k).copy_from_slice(&experts.partial(a.expert, rows.row(idx), t, m));
            }
            count += pairs.len();
            partials.push(out);
        }
        let deps = dispatched.ready[r].clone();
        if count > 0 {
            let id = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::ExpertCompute,
                    phase: Phase::Compute,
                    peer: None,
                    group: vec![],
                    bytes: 0,
                    elems: count as u64 * experts.partial_ops(h, m),
                    round: 0,
                    lane: Some(Lane::Compute),
                },
                deps,
            );
            ready.push(vec![id]);
        } else {
            ready.push(deps);
        }
        per_rank.push(partials);
        counts.push(count);
    }
    (Stage { per_rank, ready }, counts)
}

/// Weights assignment rows and sums them per token, in the order of `plan.sent[p][q]`.
fn weight_and_fold(plan: &RoutingPlan, p: usize, q: usize, rows: &LogicalTensor) -> LogicalTensor {
    let sent = &plan.sent[p][q];
    let mut out = LogicalTensor::zeros(sent.len(), rows.cols());
    for (k, a) in plan.pairs[p][q].iter().enumerate() {
        let idx = sent.binary_search(&a.token).expect("assigned token was sent");
        for (o, v) in out.row_mut(idx).iter_mut().zip(rows.row(k)) {
            *o += a.weight * v;
        }
    }
    out
}

fn scatter_add(y: &mut LogicalTensor, plan: &RoutingPlan, tokens: &[usize], rows: &LogicalTensor) {
    for (k, &token) in tokens.iter().enumerate() {
        for (o, v) in y.row_mut(plan.local_row(token)).iter_mut().zip(rows.row(k)) {
            *o += v;
        }
    }
}

struct CombineResult {
    y: Vec<LogicalTensor>,
    staged_peak: Vec<usize>,
}

fn fused_combine_stage(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    partials: &Stage<Vec<LogicalTensor>>,
    tb: &mut TraceBuilder,
) -> Result<CombineResult, SimError> {
    let (n, m) = (cluster.n_node, cluster.n_proc);
    let size = cluster.size();
    let w = plan.slice_width();

    // Reduce-scatter, weight and fold the partials bound for node q + i.
    let mut staged: Vec<Vec<Option<LogicalTensor>>> = vec![vec![None; n]; size];
    let mut weight_ids = vec![vec![0usize; n]; size];
    for i in 0..n {
        for q in 0..n {
            let p = (q + i) % n;
            let group = cluster.tp_group(q);
            let inputs: Vec<LogicalTensor> = group.iter().map(|&g| partials.per_rank[g][p].clone()).collect();
            let shards = ref_reduce_scatter(&inputs)?;
            let deps: Vec<usize> = group.iter().flat_map(|&g| partials.ready[g].iter().copied()).collect();
            let mut rs_ids = Vec::with_capacity(m);
            for &g in &group {
                rs_ids.push(tb.push(
                    EventSpec {
                        rank: g,
                        op: Op::ReduceScatter,
                        phase: Phase::CombineRs,
                        peer: None,
                        group: group.clone(),
                        bytes: inputs[0].bytes(),
                        elems: 0,
                        round: i,
                        lane: Some(group_lane(cluster, &group)),
                    },
                    deps.clone(),
                ));
            }
            for ((&g, shard), rs_id) in group.iter().zip(shards).zip(rs_ids) {
                let folded = weight_and_fold(plan, p, q, &shard);
                weight_ids[g][i] = tb.push(
                    EventSpec {
                        rank: g,
                        op: Op::LocalReduce,
                        phase: Phase::CombineRs,
                        peer: None,
                        group: vec![],
                        bytes: 0,
                        elems: (plan.pairs[p][q].len() * w) as u64,
                        round: i,
                        lane: Some(Lane::Compute),
                    },
                    [rs_id],
                );
                staged[g][i] = Some(folded);
            }
        }
    }

    // Inter-node pairwise exchange of the folded slices.
    let mut y: Vec<LogicalTensor> = (0..size).map(|_| LogicalTensor::zeros(plan.tokens_per_node, w)).collect();
    let mut inbound: Vec<Vec<Option<(usize, LogicalTensor)>>> = vec![vec![None; n]; size];
    let mut send_ids = vec![vec![0usize; n]; size];
    for i in 1..n {
        for r in 0..size {
            let to = (r + i * m) % size;
            let payload = staged[r][i].take().expect("staged");
            send_ids[r][i] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Isend,
                    phase: Phase::CombineA2a,
                    peer: Some(to),
                    group: vec![],
                    bytes: payload.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: Some(comm_lane(cluster, r, to)),
                },
                [weight_ids[r][i]],
            );
            cluster.isend(r, to, i, "combine", payload);
        }
    }
    let mut recv_ids = vec![vec![0usize; n]; size];
    for i in 1..n {
        for r in 0..size {
            let from = (r + size - i * m) % size;
            let rows = cluster.irecv(r, from, i, "combine")?;
            recv_ids[r][i] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Irecv,
                    phase: Phase::CombineA2a,
                    peer: Some(from),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: None,
                },
                [send_ids[from][i]],
            );
            inbound[r][i] = Some((cluster.ranks[from].node, rows));
        }
    }

    // Staged buffers: the local fold plus one received buffer per round.
    let mut staged_peak = vec![0usize; size];
    let mut acc_ids: Vec<Vec<usize>> = vec![Vec::with_capacity(n); size];
    for r in 0..size {
        let p = cluster.ranks[r].node;
        let local = staged[r][0].take().expect("local fold");
        let mut held = local.len();
        scatter_add(&mut y[r], plan, &plan.sent[p][p], &local);
        acc_ids[r].push(tb.push(
            EventSpec {
                rank: r,
                op: Op::LocalReduce,
                phase: Phase::CombineAcc,
                peer: None,
                group: vec![],
                bytes: 0,
                elems: local.len() as u64,
                round: 0,
                lane: Some(Lane::Compute),
            },
            [weight_ids[r][0]],
        ));
        for i in 1..n {
            let (q, rows) = inbound[r][i].take().expect("received");
            held += rows.len();
            scatter_add(&mut y[r], plan, &plan.sent[p][q], &rows);
            acc_ids[r].push(tb.push(
                EventSpec {
                    rank: r,
                    op: Op::LocalReduce,
                    phase: Phase::CombineAcc,
                    peer: None,
                    group: vec![],
                    bytes: 0,
                    elems: rows.len() as u64,
                    round: i,
                    lane: Some(Lane::Compute),
                },
                [recv_ids[r][i]],
            ));
        }
        staged_peak[r] = held;
    }

    // Final all-gather restores the full hidden width.
    let mut out = vec![None; size];
    for q in 0..n {
        let group = cluster.tp_group(q);
        let shards: Vec<LogicalTensor> = group.iter().map(|&g| y[g].clone()).collect();
        let full = ref_all_gather(&shards)?;
        let deps: Vec<usize> = group.iter().flat_map(|&g| acc_ids[g].iter().copied()).collect();
        for (&g, t) in group.iter().zip(full) {
            tb.push(
                EventSpec {
                    rank: g,
                    op: Op::AllGather,
                    phase: Phase::CombineAg,
                    peer: None,
                    group: group.clone(),
                    bytes: t.bytes(),
                    elems: 0,
                    round: 0,
                    lane: Some(group_lane(cluster, &group)),
                },
                deps.clone(),
            );
            out[g] = Some(t);
        }
    }
    cluster.assert_drained()?;
    Ok(CombineResult {
        y: out.into_iter().map(|t| t.expect("gathered")).collect(),
        staged_peak,
    })
}

fn baseline_combine_stage(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    partials: &Stage<Vec<LogicalTensor>>,
    tb: &mut TraceBuilder,
) -> Result<CombineResult, SimError> {
    let (n, m, h) = (cluster.n_node, cluster.n_proc, plan.hidden);
    let size = cluster.size();
    let mut send_ids = vec![vec![0usize; n]; size];
    for i in 1..n {
        for r in 0..size {
            let q = cluster.ranks[r].node;
            let p = (q + i) % n;
            let to = (r + i * m) % size;
            let payload = partials.per_rank[r][p].clone();
            send_ids[r][i] = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Isend,
                    phase: Phase::CombineA2a,
                    peer: Some(to),
                    group: vec![],
                    bytes: payload.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: Some(comm_lane(cluster, r, to)),
                },
                partials.ready[r].clone(),
            );
            cluster.isend(r, to, i, "combine", payload);
        }
    }
    let mut z: Vec<LogicalTensor> = (0..size).map(|_| LogicalTensor::zeros(plan.tokens_per_node, h)).collect();
    let mut acc_ids = vec![Vec::new(); size];
    for r in 0..size {
        let p = cluster.ranks[r].node;
        let local = weight_and_fold(plan, p, p, &partials.per_rank[r][p]);
        scatter_add(&mut z[r], plan, &plan.sent[p][p], &local);
        acc_ids[r].push(tb.push(
            EventSpec {
                rank: r,
                op: Op::LocalReduce,
                phase: Phase::CombineAcc,
                peer: None,
                group: vec![],
                bytes: 0,
                elems: (plan.pairs[p][p].len() * h) as u64,
                round: 0,
                lane: Some(Lane::Compute),
            },
            partials.ready[r].clone(),
        ));
    }
    for i in 1..n {
        for r in 0..size {
            let p = cluster.ranks[r].node;
            let from = (r + size - i * m) % size;
            let q = cluster.ranks[from].node;
            let rows = cluster.irecv(r, from, i, "combine")?;
            let recv = tb.push(
                EventSpec {
                    rank: r,
                    op: Op::Irecv,
                    phase: Phase::CombineA2a,
                    peer: Some(from),
                    group: vec![],
                    bytes: rows.bytes(),
                    elems: 0,
                    round: i - 1,
                    lane: None,
                },
                [send_ids[from][i]],
            );
            let folded = weight_and_fold(plan, p, q, &rows);
            scatter_add(&mut z[r], plan, &plan.sent[p][q], &folded);
            acc_ids[r].push(tb.push(
                EventSpec {
                    rank: r,
                    op: Op::LocalReduce,
                    phase: Phase::CombineAcc,
                    peer: None,
                    group: vec![],
                    bytes: 0,
                    elems: (plan.pairs[p][q].len() * h) as u64,
                    round: i,
                    lane: Some(Lane::Compute),
                },
                [recv],
            ));
        }
    }
    // All-reduce of the TP partial sums, as reduce-scatter then all-gather.
    let mut out = vec![None; size];
    for q in 0..n {
        let group = cluster.tp_group(q);
        let inputs: Vec<LogicalTensor> = group.iter().map(|&g| z[g].clone()).collect();
        let shards = ref_reduce_scatter(&inputs)?;
        let deps: Vec<usize> = group.iter().flat_map(|&g| acc_ids[g].iter().copied()).collect();
        let rs_ids: Vec<usize> = group
            .iter()
            .map(|&g| {
                tb.push(
                    EventSpec {
                        rank: g,
                        op: Op::ReduceScatter,
                        phase: Phase::ArReduceScatter,
                        peer: None,
                        group: group.clone(),
                        bytes: inputs[0].bytes(),
                        elems: 0,
                        round: 0,
                        lane: Some(group_lane(cluster, &group)),
                    },
                    deps.clone(),
                )
            })
            .collect();
        let full = ref_all_gather(&shards)?;
        for (&g, t) in group.iter().zip(full) {
            tb.push(
                EventSpec {
                    rank: g,
                    op: Op::AllGather,
                    phase: Phase::ArAllGather,
                    peer: None,
                    group: group.clone(),
                    bytes: t.bytes(),
                    elems: 0,
                    round: 0,
                    lane: Some(group_lane(cluster, &group)),
                },
                rs_ids.clone(),
            );
            out[g] = Some(t);
        }
    }
    cluster.assert_drained()?;
    Ok(CombineResult {
        y: out.into_iter().map(|t| t.expect("reduced")).collect(),
        staged_peak: vec![0; size],
    })
}

fn check_cluster(cluster: &SimCluster, plan: &RoutingPlan) -> Result<(), SimError> {
    if cluster.n_node != plan.n_node || cluster.n_proc != plan.n_proc {
        return Err(SimError::Shape(format!(
            "plan is for {}x{}, cluster is {}x{}",
            plan.n_node, plan.n_proc, cluster.n_node, cluster.n_proc
        )));
    }
    if cluster.ranks.iter().any(|r| !r.inbox.is_empty()) {
        return Err(SimError::Protocol("cluster inboxes are not empty".into()));
    }
    Ok(())
}

/// Output of [`fused_ag_dispatch`].
#[derive(Debug, Clone)]
pub struct DispatchOutput {
    pub per_rank: Vec<Dispatched>,
    pub trace: Vec<TraceEvent>,
}

/// Fused AG-Dispatch on its own. `x_nodes[j]` is node `j`'s token block,
/// replicated on its ranks.
pub fn fused_ag_dispatch(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    router: &RouterSpec,
    x_nodes: &[LogicalTensor],
    options: &SimOptions,
) -> Result<DispatchOutput, SimError> {
    check_cluster(cluster, plan)?;
    check_capacity(cluster, plan, options)?;
    let mut tb = TraceBuilder::new();
    let route_ids = route_events(cluster, plan, router, &mut tb);
    let stage = fused_dispatch_stage(cluster, plan, x_nodes, &route_ids, &mut tb)?;
    cluster.assert_drained()?;
    Ok(DispatchOutput {
        per_rank: stage.per_rank,
        trace: tb.finish(),
    })
}

/// Output of [`fused_rs_combine`]: per-rank full-width outputs of the rank's node.
#[derive(Debug, Clone)]
pub struct CombineOutput {
    pub per_rank: Vec<LogicalTensor>,
    pub staged_peak_values: Vec<usize>,
    pub trace: Vec<TraceEvent>,
}

/// Fused RS-Combine on its own. `partials[r][p]` holds rank `r`'s expert
/// partials for the assignments in `plan.pairs[p][node(r)]`.
pub fn fused_rs_combine(
    cluster: &mut SimCluster,
    plan: &RoutingPlan,
    partials: Vec<Vec<LogicalTensor>>,
) -> Result<CombineOutput, SimError> {
    check_cluster(cluster, plan)?;
    if partials.len() != cluster.size() {
        return Err(SimError::Shape(format!(
            "expected partials for {} ranks, got {}",
            cluster.size(),
            partials.len()
        )));
    }
    for (r, per) in partials.iter().enumerate() {
        let q = cluster.ranks[r].node;
        for (p, t) in per.iter().enumerate() {
            if t.rows() != plan.pairs[p][q].len() || t.cols() != plan.hidden {
                return Err(SimError::Shape(format!(
                    "rank {r}: partials for source {p} have shape {:?}",
                    t.shape()
                )));
            }
        }
    }
    let mut tb = TraceBuilder::new();
    let stage = Stage {
        ready: vec![Vec::new(); partials.len()],
        per_rank: partials,
    };
    let res = fused_combine_stage(cluster, plan, &stage, &mut tb)?;
    Ok(CombineOutput {
        per_rank: res.y,
        staged_peak_values: res.staged_peak,
        trace: tb.finish(),
    })
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub y: LogicalTensor,
    pub trace: Vec<TraceEvent>,
    pub stats: Vec<RankStats>,
    pub mode: Mode,
}

/// The strategy text of the simulated layout for an `n_node x n_proc` cluster.
pub fn hybrid_strategy(n_node: usize, n_proc: usize) -> ParallelStrategy {
    let (n, m) = (n_node, n_proc);
    let text = match (n > 1, m > 1) {
        (true, true) => format!("TP={m} + DP={n}, TP={m} + EP={n}"),
        (true, false) => format!("DP={n}, EP={n}"),
        (false, _) => format!("TP={m}"),
    };
    parse_strategy(&text).expect("layout text is grammatical")
}

fn check_strategy(cluster: &SimCluster, strategy: &ParallelStrategy) -> Result<(), SimError> {
    let (n, m) = (cluster.n_node as u64, cluster.n_proc as u64);
    if strategy.d_pp != 1 {
        return Err(SimError::Unsupported(format!("'{strategy}' has pipeline stages")));
    }
    if strategy.moe_tp() != m || strategy.d_ep() != n {
        return Err(SimError::Unsupported(format!(
            "'{strategy}' does not have MoE TP={m} and EP={n}"
        )));
    }
    if strategy.attn_tp() * strategy.d_dp() != m * n {
        return Err(SimError::Unsupported(format!(
            "'{strategy}' attention block does not cover {} devices",
            m * n
        )));
    }
    Ok(())
}

/// Simulation grid `(EP groups, TP ranks per group)` for a strategy.
pub fn grid_for(strategy: &ParallelStrategy) -> (usize, usize) {
    (strategy.d_ep() as usize, strategy.moe_tp() as usize)
}

/// Dispatch, expert compute and combine for the whole block. Tokens are
/// split evenly over the EP groups; the returned `y` stacks each group's
/// output as held by its TP rank 0.
pub fn run_moe_block(
    cluster: &mut SimCluster,
    strategy: &ParallelStrategy,
    x: &LogicalTensor,
    router: &RouterSpec,
    experts: &ExpertSpec,
    options: &SimOptions,
) -> Result<BlockOutput, SimError> {
    check_strategy(cluster, strategy)?;
    if experts.num_experts() != router.num_experts() {
        return Err(SimError::Shape(format!(
            "{} expert transforms for {} routed experts",
            experts.num_experts(),
            router.num_experts()
        )));
    }
    if let ExpertSpec::Dense { hidden, .. } = experts {
        if *hidden != x.cols() {
            return Err(SimError::Shape(format!("dense experts expect width {hidden}, input has {}", x.cols())));
        }
    }
    let plan = RoutingPlan::new(cluster.n_node, cluster.n_proc, x.rows(), x.cols(), router)?;
    check_cluster(cluster, &plan)?;
    check_capacity(cluster, &plan, options)?;
    let x_nodes = node_inputs(x, &plan);

    let mut tb = TraceBuilder::new();
    let route_ids = route_events(cluster, &plan, router, &mut tb);
    let dispatched = match options.mode {
        Mode::Fused => fused_dispatch_stage(cluster, &plan, &x_nodes, &route_ids, &mut tb)?,
        Mode::Baseline => baseline_dispatch_stage(cluster, &plan, &x_nodes, &route_ids, &mut tb)?,
    };
    cluster.assert_drained()?;
    let (partials, assignments) = expert_stage(cluster, &plan, &dispatched, experts, &mut tb);
    let combined = match options.mode {
        Mode::Fused => fused_combine_stage(cluster, &plan, &partials, &mut tb)?,
        Mode::Baseline => baseline_combine_stage(cluster, &plan, &partials, &mut tb)?,
    };

    let n = cluster.n_node;
    let bound = n * plan.tokens_per_node * plan.slice_width();
    let stats = (0..cluster.size())
        .map(|r| {
            let q = cluster.ranks[r].node;
            RankStats {
                rank: r,
                staged_peak_values: combined.staged_peak[r],
                staged_bound_values: bound,
                dispatch_rows: (0..n).filter(|&p| p != q).map(|p| plan.recv_rows(p, q)).sum(),
                assignments: assignments[r],
            }
        })
        .collect();
    let nodes: Vec<LogicalTensor> = (0..n).map(|q| combined.y[cluster.rank_of(q, 0)].clone()).collect();
    for r in 0..cluster.size() {
        let q = cluster.ranks[r].node;
        if combined.y[r] != nodes[q] {
            return Err(SimError::Protocol(format!("rank {r} disagrees with its TP group")));
        }
    }
    Ok(BlockOutput {
        y: LogicalTensor::concat_rows(&nodes)?,
        trace: tb.finish(),
        stats,
        mode: options.mode,
    })
}

/// Seeded input activations in `[-1, 1)`.
pub fn random_input(tokens: usize, hidden: usize, seed: u64) -> LogicalTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let values = (0..tokens * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
    LogicalTensor::new(vec![tokens, hidden], values).expect("shape matches")
}
