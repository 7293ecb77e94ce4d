//! Assigns start and end times to trace events. Each rank has three lanes
//! (intra-node link, inter-node link, compute); events on different lanes
//! overlap freely, events on one lane run one at a time in order of ready time.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{CalibrationCoefficients, ClusterConfig};
use crate::costmodel::{rs_cost, LinkClass, Links};
use crate::simcluster::{Lane, Op, Phase, TraceEvent};

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("dependency cycle through events {0:?}")]
    Cycle(Vec<usize>),
    #[error("event {event} depends on unknown event {dep}")]
    UnknownDependency { event: usize, dep: usize },
    #[error("event at position {position} has id {id}; ids must equal positions")]
    BadId { position: usize, id: usize },
    #[error("timelines come from different workloads ({0} vs {1})")]
    FingerprintMismatch(String, String),
    #[error("unknown gantt format '{0}' (expected csv, svg or json)")]
    Format(String),
    #[error("cannot write {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub id: usize,
    pub rank: usize,
    pub op: Op,
    pub phase: Phase,
    pub lane: Option<Lane>,
    pub round: usize,
    pub bytes: u64,
    pub start: f64,
    pub end: f64,
}

impl ScheduledEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub fingerprint: String,
    pub events: Vec<ScheduledEvent>,
    pub makespan: f64,
    /// Busy seconds per lane, keyed `r<rank>.<lane>`.
    pub lane_busy: BTreeMap<String, f64>,
    /// Busy fraction of the makespan per lane.
    pub utilization: BTreeMap<String, f64>,
}

pub fn lane_key(rank: usize, lane: Lane) -> String {
    format!("r{rank}.{lane}")
}

/// Hash of everything in the trace except dependencies, so a trace and its
/// synchronous variant share a fingerprint.
pub fn fingerprint(trace: &[TraceEvent]) -> String {
    let mut h = Sha256::new();
    for e in trace {
        h.update(
            format!(
                "{}|{}|{}|{}|{}|{}|{}|{}|{}|{:?}\n",
                e.id,
                e.rank,
                e.op,
                e.phase,
                e.peer_or_group(),
                e.bytes,
                e.elems,
                e.round,
                e.lane.map_or_else(String::new, |l| l.to_string()),
                e.group,
            )
            .as_bytes(),
        );
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Link and compute coefficients used for event durations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub links: Links,
    pub compute_coeff: f64,
}

impl CostParams {
    pub fn new(cluster: &ClusterConfig, calib: &CalibrationCoefficients) -> Self {
        Self {
            links: Links::resolve(cluster, calib),
            compute_coeff: calib.compute_coeff,
        }
    }

    fn link(&self, lane: Lane) -> LinkClass {
        match lane {
            Lane::Inter => self.links.inter,
            _ => self.links.intra,
        }
    }

    /// Point-to-point: `alpha + bytes/beta`. Collectives: one round of
    /// `bytes / group` at the lane's link, zero for a group of one. Compute:
    /// coefficient times multiply-adds. Markers take no time.
    pub fn duration(&self, e: &TraceEvent) -> f64 {
        let Some(lane) = e.lane else {
            return 0.0;
        };
        match e.op {
            Op::Isend | Op::Irecv => self.link(lane).transfer(e.bytes as f64),
            Op::ReduceScatter | Op::AllGather => rs_cost(e.bytes as f64, e.group.len() as u64, self.link(lane)),
            Op::LocalReduce | Op::ExpertCompute | Op::Route => self.compute_coeff * e.elems as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ready(f64, usize);

impl Eq for Ready {}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ready {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn find_cycle(trace: &[TraceEvent], pending: &[bool]) -> Vec<usize> {
    // Walk dependencies among unscheduled events until one repeats.
    let start = pending.iter().position(|&p| p).expect("some event is pending");
    let mut path = vec![start];
    let mut seen = vec![usize::MAX; trace.len()];
    seen[start] = 0;
    let mut cur = start;
    loop {
        let next = trace[cur]
            .deps
            .iter()
            .copied()
            .find(|&d| pending[d])
            .expect("a pending event has a pending dependency");
        if seen[next] != usize::MAX {
            let mut cycle = path[seen[next]..].to_vec();
            cycle.sort_unstable();
            return cycle;
        }
        seen[next] = path.len();
        path.push(next);
        cur = next;
    }
}

/// List-schedules `trace`: an event becomes ready when all dependencies have
/// ended and starts once its lane is free; ready events are taken in order of
/// ready time, ties broken by event id.
pub fn schedule_with(trace: &[TraceEvent], params: &CostParams) -> Result<Timeline, TimelineError> {
    let n = trace.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut missing = vec![0usize; n];
    for (pos, e) in trace.iter().enumerate() {
        if e.id != pos {
            return Err(TimelineError::BadId { position: pos, id: e.id });
        }
        for &d in &e.deps {
            if d >= n {
                return Err(TimelineError::UnknownDependency { event: e.id, dep: d });
            }
            children[d].push(pos);
            missing[pos] += 1;
        }
    }
    let mut ready_at = vec![0.0f64; n];
    let mut heap: BinaryHeap<Reverse<Ready>> = (0..n)
        .filter(|&i| missing[i] == 0)
        .map(|i| Reverse(Ready(0.0, i)))
        .collect();
    let mut lane_free: BTreeMap<(usize, Lane), f64> = BTreeMap::new();
    let mut slots: Vec<Option<ScheduledEvent>> = vec![None; n];
    let mut done = 0;
    while let Some(Reverse(Ready(ready, i))) = heap.pop() {
        let e = &trace[i];
        let dur = params.duration(e);
        let start = match e.lane {
            Some(lane) => {
                let free = lane_free.entry((e.rank, lane)).or_insert(0.0);
                let s = ready.max(*free);
                *free = s + dur;
                s
            }
            None => ready,
        };
        let end = start + dur;
        slots[i] = Some(ScheduledEvent {
            id: e.id,
            rank: e.rank,
            op: e.op,
            phase: e.phase,
            lane: e.lane,
            round: e.round,
            bytes: e.bytes,
            start,
            end,
        });
        done += 1;
        for &c in &children[i] {
            ready_at[c] = ready_at[c].max(end);
            missing[c] -= 1;
            if missing[c] == 0 {
                heap.push(Reverse(Ready(ready_at[c], c)));
            }
        }
    }
    if done < n {
        let pending: Vec<bool> = slots.iter().map(Option::is_none).collect();
        return Err(TimelineError::Cycle(find_cycle(trace, &pending)));
    }
    let events: Vec<ScheduledEvent> = slots.into_iter().map(|s| s.expect("scheduled")).collect();
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let mut lane_busy = BTreeMap::new();
    for e in &events {
        if let Some(lane) = e.lane {
            *lane_busy.entry(lane_key(e.rank, lane)).or_insert(0.0) += e.duration();
        }
    }
    let utilization = lane_busy
        .iter()
        .map(|(k, &b)| (k.clone(), if makespan > 0.0 { b / makespan } else { 0.0 }))
        .collect();
    Ok(Timeline {
        fingerprint: fingerprint(trace),
        events,
        makespan,
        lane_busy,
        utilization,
    })
}

pub fn schedule(
    trace: &[TraceEvent],
    cluster: &ClusterConfig,
    calib: &CalibrationCoefficients,
) -> Result<Timeline, TimelineError> {
    schedule_with(trace, &CostParams::new(cluster, calib))
}

/// The same events with a global barrier between consecutive phases: every
/// event of a phase also waits for every event of the preceding phase.
///
/// Data dependencies never point to a later phase, so a dependency that does
/// is lane program order from interleaved rounds. Those are dropped; the
/// barriers reorder such rounds phase by phase.
pub fn synchronous(trace: &[TraceEvent]) -> Vec<TraceEvent> {
    let mut by_phase: BTreeMap<Phase, Vec<usize>> = BTreeMap::new();
    for e in trace {
        by_phase.entry(e.phase).or_default().push(e.id);
    }
    let phases: Vec<Phase> = by_phase.keys().copied().collect();
    let phase_of = |id: usize| trace.get(id).map(|d| d.phase);
    let mut out = trace.to_vec();
    for e in &mut out {
        let phase = e.phase;
        e.deps.retain(|&d| phase_of(d).map_or(true, |p| p <= phase));
    }
    for w in phases.windows(2) {
        let before = &by_phase[&w[0]];
        for &id in &by_phase[&w[1]] {
            let deps = &mut out[id].deps;
            deps.extend(before.iter().copied());
            deps.sort_unstable();
            deps.dedup();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub fused_makespan: f64,
    pub sync_makespan: f64,
    /// `sync - fused`.
    pub savings: f64,
    /// `savings / sync`, zero for an empty schedule.
    pub savings_ratio: f64,
    pub busiest_intra: f64,
    pub busiest_inter: f64,
    /// `max(busiest_intra, busiest_inter)`.
    pub lower_bound: f64,
    pub fused_le_sync: bool,
    pub fused_ge_lower_bound: bool,
}

fn busiest(t: &Timeline, lane: Lane) -> f64 {
    let suffix = format!(".{lane}");
    t.lane_busy
        .iter()
        .filter(|(k, _)| k.ends_with(&suffix))
        .map(|(_, &v)| v)
        .fold(0.0, f64::max)
}

pub fn overlap_metrics(fused: &Timeline, sync: &Timeline) -> Result<OverlapMetrics, TimelineError> {
    if fused.fingerprint != sync.fingerprint {
        return Err(TimelineError::FingerprintMismatch(
            fused.fingerprint.clone(),
            sync.fingerprint.clone(),
        ));
    }
    let busiest_intra = busiest(fused, Lane::Intra);
    let busiest_inter = busiest(fused, Lane::Inter);
    let lower_bound = busiest_intra.max(busiest_inter);
    let savings = sync.makespan - fused.makespan;
    // Sums of the same durations in a different order may differ by an ulp.
    let slack = 1e-12 * sync.makespan.max(lower_bound);
    Ok(OverlapMetrics {
        fused_makespan: fused.makespan,
        sync_makespan: sync.makespan,
        savings,
        savings_ratio: if sync.makespan > 0.0 { savings / sync.makespan } else { 0.0 },
        busiest_intra,
        busiest_inter,
        lower_bound,
        fused_le_sync: fused.makespan <= sync.makespan + slack,
        fused_ge_lower_bound: fused.makespan + slack >= lower_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanttFormat {
    Csv,
    Svg,
    Json,
}

impl FromStr for GanttFormat {
    type Err = TimelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(GanttFormat::Csv),
            "svg" => Ok(GanttFormat::Svg),
            "json" => Ok(GanttFormat::Json),
            other => Err(TimelineError::Format(other.to_string())),
        }
    }
}

impl GanttFormat {
    pub fn extension(self) -> &'static str {
        match self {
            GanttFormat::Csv => "csv",
            GanttFormat::Svg => "svg",
            GanttFormat::Json => "json",
        }
    }
}

pub const GANTT_CSV_HEADER: &str = "rank,lane,op,start_s,end_s,bytes";

fn lane_label(lane: Option<Lane>) -> String {
    lane.map_or_else(|| "marker".to_string(), |l| l.to_string())
}

pub fn render_csv(t: &Timeline) -> String {
    let mut out = String::from(GANTT_CSV_HEADER);
    out.push('\n');
    for e in &t.events {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{}",
            e.rank,
            lane_label(e.lane),
            e.op,
            e.start,
            e.end,
            e.bytes
        );
    }
    out
}

pub fn render_json(t: &Timeline) -> String {
    let mut s = serde_json::to_string_pretty(t).expect("timeline serializes");
    s.push('\n');
    s
}

/// One row per rank and lane, one bar per event (markers as zero-width bars).
pub fn render_svg(t: &Timeline) -> String {
    const WIDTH: f64 = 960.0;
    const LABEL: f64 = 120.0;
    const ROW: f64 = 22.0;
    let lanes = [Some(Lane::Intra), Some(Lane::Inter), Some(Lane::Compute), None];
    let mut rows: Vec<(usize, Option<Lane>)> = Vec::new();
    let ranks = t.events.iter().map(|e| e.rank + 1).max().unwrap_or(0);
    for r in 0..ranks {
        for l in lanes {
            if t.events.iter().any(|e| e.rank == r && e.lane == l) {
                rows.push((r, l));
            }
        }
    }
    let height = ROW * rows.len() as f64 + 30.0;
    let scale = if t.makespan > 0.0 { WIDTH / t.makespan } else { 0.0 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="monospace" font-size="11">"#,
        WIDTH + LABEL + 10.0,
        height
    );
    let _ = writeln!(out, r#"<text x="4" y="14">makespan {:e} s</text>"#, t.makespan);
    for (i, (r, l)) in rows.iter().enumerate() {
        let y = 20.0 + ROW * i as f64;
        let _ = writeln!(out, r#"<text x="4" y="{:.1}">r{} {}</text>"#, y + 14.0, r, lane_label(*l));
        for e in t.events.iter().filter(|e| e.rank == *r && e.lane == *l) {
            let color = match e.lane {
                Some(Lane::Intra) => "#8fd18f",
                Some(Lane::Inter) => "#f0a050",
                Some(Lane::Compute) => "#7fa7e0",
                None => "#999999",
            };
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{:.3}" y="{:.1}" width="{:.3}" height="{:.1}" fill="{}"><title>{} {} round {} [{:e}, {:e}]</title></rect>"#,
                LABEL + e.start * scale,
                y + 2.0,
                e.duration() * scale,
                ROW - 4.0,
                color,
                e.op,
                e.phase,
                e.round,
                e.start,
                e.end
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_gantt(t: &Timeline, format: GanttFormat) -> String {
    match format {
        GanttFormat::Csv => render_csv(t),
        GanttFormat::Svg => render_svg(t),
        GanttFormat::Json => render_json(t),
    }
}

pub fn export_gantt(t: &Timeline, path: impl AsRef<Path>, format: GanttFormat) -> Result<(), TimelineError> {
    let path = path.as_ref();
    fs::write(path, render_gantt(t, format)).map_err(|source| TimelineError::Io {
        path: path.display().to_string(),
        source,
    })
}
