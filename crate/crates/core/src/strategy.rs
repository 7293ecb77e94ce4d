//! Hybrid TP/EP/DP/PP parallel strategies.
//!
//! Strategy strings follow the notation `<attention>, <moe> [PP=n]`, where
//! each block is `P=d` or `P=d + P=d`, e.g. `TP=4 + DP=8, EP=32`. A single
//! TP-only block (`TP=8 [PP=4]`) applies to both the attention and the MoE
//! block.
//!
//! Devices are numbered node-major. Inside a pipeline stage of
//! `N / d_pp` consecutive ranks the first component of a block is the
//! innermost (consecutive ranks), so `TP=8 + EP=4` on 4x8 puts each TP group
//! inside one node and spreads the EP group over the four nodes.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{is_power_of_two, ClusterConfig, ModelHyperparams, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("strategy grammar: {0}")]
    Grammar(String),
    #[error("{kind} degree must be a power of two, got {degree}")]
    NotPowerOfTwo { kind: ParallelKind, degree: u64 },
    #[error("{block} block cannot contain {kind}")]
    ForbiddenKind { block: &'static str, kind: ParallelKind },
    #[error("{block} block repeats {kind}")]
    DuplicateKind { block: &'static str, kind: ParallelKind },
    #[error("degree product mismatch: {block} block x PP = {product}, cluster has {devices} devices")]
    ProductMismatch {
        block: &'static str,
        product: u64,
        devices: u64,
    },
    #[error("d_DP={d_dp} and d_EP={d_ep} are not multiples of one another")]
    Indivisible { d_dp: u64, d_ep: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParallelKind {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "EP")]
    Ep,
    #[serde(rename = "DP")]
    Dp,
}

impl fmt::Display for ParallelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParallelKind::Tp => "TP",
            ParallelKind::Ep => "EP",
            ParallelKind::Dp => "DP",
        })
    }
}

/// Where a communication group lives relative to node boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Entirely inside one node.
    IntraNode,
    /// One member per node.
    InterNode,
    /// Spans nodes with several members per node, or not yet bound to a cluster.
    Flat,
}

impl Scope {
    /// Scope of a group of `size` ranks spaced `stride` apart.
    pub fn of_group(stride: u64, size: u64, n_proc: u64) -> Scope {
        if size <= 1 || stride * size <= n_proc {
            Scope::IntraNode
        } else if stride >= n_proc {
            Scope::InterNode
        } else {
            Scope::Flat
        }
    }

    /// Whether traffic of this group crosses node boundaries.
    pub fn crosses_nodes(self) -> bool {
        !matches!(self, Scope::IntraNode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParallel {
    pub kind: ParallelKind,
    pub degree: u64,
    pub scope: Scope,
}

impl BlockParallel {
    pub fn new(kind: ParallelKind, degree: u64) -> Self {
        Self {
            kind,
            degree,
            scope: Scope::Flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelStrategy {
    pub attention: Vec<BlockParallel>,
    pub moe: Vec<BlockParallel>,
    pub d_pp: u64,
}

fn degree_of(block: &[BlockParallel], kind: ParallelKind) -> u64 {
    block
        .iter()
        .filter(|b| b.kind == kind)
        .map(|b| b.degree)
        .product()
}

fn product(block: &[BlockParallel]) -> u64 {
    block.iter().map(|b| b.degree).product()
}

/// Stride of the component of `kind` in `block` (product of the degrees before it).
fn stride_of(block: &[BlockParallel], kind: ParallelKind) -> u64 {
    let mut stride = 1;
    for b in block {
        if b.kind == kind {
            return stride;
        }
        stride *= b.degree;
    }
    stride
}

fn format_block(block: &[BlockParallel]) -> String {
    block
        .iter()
        .map(|b| format!("{}={}", b.kind, b.degree))
        .collect::<Vec<_>>()
        .join(" + ")
}

impl ParallelStrategy {
    /// TP degree of the attention block.
    pub fn attn_tp(&self) -> u64 {
        degree_of(&self.attention, ParallelKind::Tp)
    }

    /// TP degree of the MoE block.
    pub fn moe_tp(&self) -> u64 {
        degree_of(&self.moe, ParallelKind::Tp)
    }

    pub fn d_ep(&self) -> u64 {
        degree_of(&self.moe, ParallelKind::Ep)
    }

    pub fn d_dp(&self) -> u64 {
        degree_of(&self.attention, ParallelKind::Dp)
    }

    /// Devices per pipeline stage.
    pub fn stage_devices(&self) -> u64 {
        product(&self.attention)
    }

    pub fn total_devices(&self) -> u64 {
        self.stage_devices() * self.d_pp
    }

    /// Deterministic ordering key `(d_pp, attention TP, MoE TP, d_EP, d_DP)`.
    pub fn sort_key(&self) -> (u64, u64, u64, u64, u64) {
        (self.d_pp, self.attn_tp(), self.moe_tp(), self.d_ep(), self.d_dp())
    }

    /// Total order: `sort_key`, then the canonical text.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.sort_key()
            .cmp(&other.sort_key())
            .then_with(|| self.to_string().cmp(&other.to_string()))
    }

    /// Checks the degree products against the cluster and derives group scopes.
    pub fn bind(mut self, cluster: &ClusterConfig) -> Result<Self, StrategyError> {
        let devices = cluster.total_devices();
        for (name, block) in [("attention", &self.attention), ("moe", &self.moe)] {
            let p = product(block) * self.d_pp;
            if p != devices {
                return Err(StrategyError::ProductMismatch {
                    block: name,
                    product: p,
                    devices,
                });
            }
        }
        for block in [&mut self.attention, &mut self.moe] {
            let mut stride = 1;
            for b in block.iter_mut() {
                b.scope = Scope::of_group(stride, b.degree, cluster.n_proc);
                stride *= b.degree;
            }
        }
        Ok(self)
    }

    /// Scope of the attention TP group.
    pub fn attn_tp_scope(&self, cluster: &ClusterConfig) -> Scope {
        Scope::of_group(
            stride_of(&self.attention, ParallelKind::Tp),
            self.attn_tp(),
            cluster.n_proc,
        )
    }

    /// Scope of the MoE TP group.
    pub fn moe_tp_scope(&self, cluster: &ClusterConfig) -> Scope {
        Scope::of_group(stride_of(&self.moe, ParallelKind::Tp), self.moe_tp(), cluster.n_proc)
    }

    /// Size and scope of one A2A communication group under the DP-EP trade-off.
    ///
    /// With `d_DP >= d_EP` the group is the EP group. Otherwise it is a run of
    /// `d_DP` consecutive EP ranks.
    pub fn a2a_group(&self, cluster: &ClusterConfig) -> (u64, Scope) {
        let (d_dp, d_ep) = (self.d_dp(), self.d_ep());
        let stride = stride_of(&self.moe, ParallelKind::Ep);
        let size = if d_dp >= d_ep { d_ep } else { d_dp };
        (size, Scope::of_group(stride, size, cluster.n_proc))
    }

    /// Scope of each of the `d_pp - 1` stage-to-stage hops.
    pub fn pp_hop_scopes(&self, cluster: &ClusterConfig) -> Vec<Scope> {
        let stage = self.stage_devices();
        (1..self.d_pp)
            .map(|i| {
                if stage >= cluster.n_proc || (i * stage) % cluster.n_proc == 0 {
                    Scope::InterNode
                } else {
                    Scope::IntraNode
                }
            })
            .collect()
    }
}

impl fmt::Display for ParallelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let attn = format_block(&self.attention);
        let moe = format_block(&self.moe);
        let single = self.attention.len() == self.moe.len()
            && self
                .attention
                .iter()
                .zip(&self.moe)
                .all(|(a, m)| a.kind == ParallelKind::Tp && m.kind == ParallelKind::Tp && a.degree == m.degree);
        if single {
            f.write_str(&attn)?;
        } else {
            write!(f, "{attn}, {moe}")?;
        }
        if self.d_pp > 1 {
            write!(f, " [PP={}]", self.d_pp)?;
        }
        Ok(())
    }
}

fn parse_degree(kind: ParallelKind, text: &str) -> Result<u64, StrategyError> {
    let degree: u64 = text
        .trim()
        .parse()
        .map_err(|_| StrategyError::Grammar(format!("bad degree {text:?}")))?;
    if !is_power_of_two(degree) {
        return Err(StrategyError::NotPowerOfTwo { kind, degree });
    }
    Ok(degree)
}

fn parse_kind(text: &str) -> Result<ParallelKind, StrategyError> {
    match text.trim().to_ascii_uppercase().as_str() {
        "TP" => Ok(ParallelKind::Tp),
        "EP" => Ok(ParallelKind::Ep),
        "DP" => Ok(ParallelKind::Dp),
        other => Err(StrategyError::Grammar(format!("unknown parallelism {other:?}"))),
    }
}

fn parse_block(text: &str) -> Result<Vec<BlockParallel>, StrategyError> {
    let parts: Vec<&str> = text.split('+').collect();
    if parts.len() > 2 {
        return Err(StrategyError::Grammar(format!(
            "block {text:?} has more than intra-node + inter-node parts"
        )));
    }
    parts
        .into_iter()
        .map(|part| {
            let (kind, degree) = part
                .split_once('=')
                .ok_or_else(|| StrategyError::Grammar(format!("expected P=d, got {:?}", part.trim())))?;
            let kind = parse_kind(kind)?;
            Ok(BlockParallel::new(kind, parse_degree(kind, degree)?))
        })
        .collect()
}

fn check_block(
    name: &'static str,
    block: &[BlockParallel],
    forbidden: ParallelKind,
) -> Result<(), StrategyError> {
    if let Some(b) = block.iter().find(|b| b.kind == forbidden) {
        return Err(StrategyError::ForbiddenKind { block: name, kind: b.kind });
    }
    if block.len() == 2 && block[0].kind == block[1].kind {
        return Err(StrategyError::DuplicateKind {
            block: name,
            kind: block[0].kind,
        });
    }
    Ok(())
}

/// Parses a strategy string. Scopes stay [`Scope::Flat`] until [`ParallelStrategy::bind`].
pub fn parse_strategy(text: &str) -> Result<ParallelStrategy, StrategyError> {
    let text = text.trim();
    let (body, d_pp) = match text.find('[') {
        Some(open) => {
            let tail = text[open..].trim();
            let inner = tail
                .strip_prefix('[')
                .and_then(|t| t.strip_suffix(']'))
                .ok_or_else(|| StrategyError::Grammar(format!("unterminated PP suffix in {text:?}")))?;
            let (kind, degree) = inner
                .split_once('=')
                .ok_or_else(|| StrategyError::Grammar(format!("expected [PP=n], got {tail:?}")))?;
            if kind.trim().to_ascii_uppercase() != "PP" {
                return Err(StrategyError::Grammar(format!("expected [PP=n], got {tail:?}")));
            }
            let degree: u64 = degree
                .trim()
                .parse()
                .map_err(|_| StrategyError::Grammar(format!("bad PP degree {degree:?}")))?;
            if !is_power_of_two(degree) {
                return Err(StrategyError::Grammar(format!(
                    "PP degree must be a power of two, got {degree}"
                )));
            }
            (&text[..open], degree)
        }
        None => (text, 1),
    };
    let specs: Vec<&str> = body.split(',').collect();
    let (attention, moe) = match specs.as_slice() {
        [single] => {
            let block = parse_block(single)?;
            if block.iter().any(|b| b.kind != ParallelKind::Tp) {
                return Err(StrategyError::Grammar(format!(
                    "a single block applies to both attention and MoE and may only use TP, got {:?}",
                    single.trim()
                )));
            }
            check_block("attention", &block, ParallelKind::Ep)?;
            (block.clone(), block)
        }
        [attn, moe] => (parse_block(attn)?, parse_block(moe)?),
        _ => {
            return Err(StrategyError::Grammar(format!(
                "expected `<attention>, <moe>`, got {body:?}"
            )))
        }
    };
    check_block("attention", &attention, ParallelKind::Ep)?;
    check_block("moe", &moe, ParallelKind::Dp)?;
    Ok(ParallelStrategy { attention, moe, d_pp })
}

fn powers_of_two_dividing(n: u64) -> impl Iterator<Item = u64> {
    (0..64)
        .map(|j| 1u64 << j)
        .take_while(move |&p| p <= n)
        .filter(move |&p| n % p == 0)
}

fn canonical_block(first: (ParallelKind, u64), second: (ParallelKind, u64)) -> Vec<BlockParallel> {
    let parts: Vec<BlockParallel> = [first, second]
        .into_iter()
        .filter(|&(_, d)| d > 1)
        .map(|(k, d)| BlockParallel::new(k, d))
        .collect();
    if parts.is_empty() {
        vec![BlockParallel::new(first.0, 1)]
    } else {
        parts
    }
}

/// All grammar-legal strategies for the cluster, TP innermost, sorted by
/// [`ParallelStrategy::canonical_cmp`].
pub fn enumerate_strategies(cluster: &ClusterConfig, model: &ModelHyperparams) -> Vec<ParallelStrategy> {
    let devices = cluster.total_devices();
    let mut out = Vec::new();
    for d_pp in powers_of_two_dividing(devices).filter(|p| model.num_layers % p == 0) {
        let stage = devices / d_pp;
        for attn_tp in powers_of_two_dividing(stage) {
            for moe_tp in powers_of_two_dividing(stage) {
                let strategy = ParallelStrategy {
                    attention: canonical_block((ParallelKind::Tp, attn_tp), (ParallelKind::Dp, stage / attn_tp)),
                    moe: canonical_block((ParallelKind::Tp, moe_tp), (ParallelKind::Ep, stage / moe_tp)),
                    d_pp,
                };
                out.push(strategy.bind(cluster).expect("enumerated strategy fits cluster"));
            }
        }
    }
    out.sort_by(|a, b| a.canonical_cmp(b));
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryVerdict {
    pub feasible: bool,
    pub required_bytes: f64,
}

/// Per-device memory: weights of both blocks plus the KV cache of this stage.
pub fn check_memory(
    strategy: &ParallelStrategy,
    model: &ModelHyperparams,
    cluster: &ClusterConfig,
    workload: &WorkloadSpec,
) -> MemoryVerdict {
    let attn = model.psi_attn / strategy.attn_tp() as f64;
    let moe = model.psi_moe / (strategy.d_ep() * strategy.moe_tp()) as f64;
    let kv = 2.0
        * (workload.batch_size * workload.seq_len * model.hidden_dim) as f64
        * model.num_layers as f64
        / strategy.d_pp as f64;
    let required_bytes = model.bytes_per_element as f64 * (attn + moe + kv);
    MemoryVerdict {
        feasible: required_bytes < cluster.mem_per_device,
        required_bytes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DpEpRelation {
    Equal,
    DpGreater,
    DpLess,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpEpCase {
    pub case: DpEpRelation,
    pub num_parallel_groups: u64,
    pub group_size: u64,
    pub redundancy_factor: f64,
}

/// Layout of the A2A groups formed by combining attention DP with MoE EP.
pub fn classify_degrees(d_dp: u64, d_ep: u64) -> Result<DpEpCase, StrategyError> {
    if d_dp == 0 || d_ep == 0 || (d_dp % d_ep != 0 && d_ep % d_dp != 0) {
        return Err(StrategyError::Indivisible { d_dp, d_ep });
    }
    let redundancy_factor = (d_ep as f64 / d_dp as f64).max(1.0);
    let (case, num_parallel_groups, group_size) = match d_dp.cmp(&d_ep) {
        Ordering::Equal => (DpEpRelation::Equal, 1, d_ep),
        Ordering::Greater => (DpEpRelation::DpGreater, d_dp / d_ep, d_ep),
        Ordering::Less => (DpEpRelation::DpLess, d_ep / d_dp, d_dp),
    };
    Ok(DpEpCase {
        case,
        num_parallel_groups,
        group_size,
        redundancy_factor,
    })
}

pub fn classify_dp_ep(strategy: &ParallelStrategy) -> Result<DpEpCase, StrategyError> {
    classify_degrees(strategy.d_dp(), strategy.d_ep())
}
