//! Trace events recorded by the simulated algorithms.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Isend,
    Irecv,
    ReduceScatter,
    AllGather,
    LocalReduce,
    ExpertCompute,
    Route,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Isend => "isend",
            Op::Irecv => "irecv",
            Op::ReduceScatter => "reduce_scatter",
            Op::AllGather => "all_gather",
            Op::LocalReduce => "local_reduce",
            Op::ExpertCompute => "expert_compute",
            Op::Route => "route",
        })
    }
}

/// Algorithm phase; the declaration order is the order a synchronous
/// execution would place barriers in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Route,
    DispatchA2a,
    DispatchAg,
    Compute,
    CombineRs,
    CombineA2a,
    CombineAcc,
    CombineAg,
    ArReduceScatter,
    ArAllGather,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Route => "route",
            Phase::DispatchA2a => "dispatch_a2a",
            Phase::DispatchAg => "dispatch_ag",
            Phase::Compute => "compute",
            Phase::CombineRs => "combine_rs",
            Phase::CombineA2a => "combine_a2a",
            Phase::CombineAcc => "combine_acc",
            Phase::CombineAg => "combine_ag",
            Phase::ArReduceScatter => "ar_reduce_scatter",
            Phase::ArAllGather => "ar_all_gather",
        })
    }
}

/// Hardware resource an event occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Intra,
    Inter,
    Compute,
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lane::Intra => "intra",
            Lane::Inter => "inter",
            Lane::Compute => "compute",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub id: usize,
    pub rank: usize,
    pub op: Op,
    pub phase: Phase,
    /// Point-to-point partner.
    pub peer: Option<usize>,
    /// Collective members in rank order; empty otherwise.
    pub group: Vec<usize>,
    pub bytes: u64,
    /// Multiply-adds for compute events.
    pub elems: u64,
    pub round: usize,
    pub deps: Vec<usize>,
    /// `None` for zero-duration completion markers.
    pub lane: Option<Lane>,
}

impl TraceEvent {
    pub fn peer_or_group(&self) -> String {
        match self.peer {
            Some(p) => p.to_string(),
            None => self.group.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

/// Appends events with ids in order, chaining each event after the previous
/// one on the same rank and lane.
#[derive(Debug, Default)]
pub struct TraceBuilder {
    events: Vec<TraceEvent>,
    last_on_lane: HashMap<(usize, Lane), usize>,
}

/// Fields of an event before it gets an id and dependencies.
#[derive(Debug, Clone)]
pub struct EventSpec {
    pub rank: usize,
    pub op: Op,
    pub phase: Phase,
    pub peer: Option<usize>,
    pub group: Vec<usize>,
    pub bytes: u64,
    pub elems: u64,
    pub round: usize,
    pub lane: Option<Lane>,
}

impl TraceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, spec: EventSpec, deps: impl IntoIterator<Item = usize>) -> usize {
        let id = self.events.len();
        let mut deps: Vec<usize> = deps.into_iter().collect();
        if let Some(lane) = spec.lane {
            if let Some(prev) = self.last_on_lane.insert((spec.rank, lane), id) {
                deps.push(prev);
            }
        }
        deps.sort_unstable();
        deps.dedup();
        debug_assert!(deps.iter().all(|&d| d < id), "dependencies must precede the event");
        self.events.push(TraceEvent {
            id,
            rank: spec.rank,
            op: spec.op,
            phase: spec.phase,
            peer: spec.peer,
            group: spec.group,
            bytes: spec.bytes,
            elems: spec.elems,
            round: spec.round,
            deps,
            lane: spec.lane,
        });
        id
    }

    pub fn finish(self) -> Vec<TraceEvent> {
        self.events
    }
}

fn parse_name<T: Copy + fmt::Display>(all: &[T], s: &str) -> Option<T> {
    all.iter().copied().find(|v| v.to_string() == s)
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Op::*;
        parse_name(&[Isend, Irecv, ReduceScatter, AllGather, LocalReduce, ExpertCompute, Route], s)
            .ok_or_else(|| format!("unknown op '{s}'"))
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Phase::*;
        parse_name(
            &[
                Route,
                DispatchA2a,
                DispatchAg,
                Compute,
                CombineRs,
                CombineA2a,
                CombineAcc,
                CombineAg,
                ArReduceScatter,
                ArAllGather,
            ],
            s,
        )
        .ok_or_else(|| format!("unknown phase '{s}'"))
    }
}

impl FromStr for Lane {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_name(&[Lane::Intra, Lane::Inter, Lane::Compute], s).ok_or_else(|| format!("unknown lane '{s}'"))
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("trace line {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const TRACE_CSV_HEADER: &str = "id,rank,op,phase,peer_or_group,bytes,elems,round,lane,dep_ids";

/// Writes the trace as CSV; `dep_ids` is space separated.
pub fn write_trace_csv<W: Write>(events: &[TraceEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_CSV_HEADER.split(','))?;
    for e in events {
        w.write_record([
            e.id.to_string(),
            e.rank.to_string(),
            e.op.to_string(),
            e.phase.to_string(),
            e.peer_or_group(),
            e.bytes.to_string(),
            e.elems.to_string(),
            e.round.to_string(),
            e.lane.map_or_else(String::new, |l| l.to_string()),
            e.deps.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_row(rec: &csv::StringRecord) -> Result<TraceEvent, String> {
    if rec.len() != 10 {
        return Err(format!("expected 10 fields, got {}", rec.len()));
    }
    fn num<T: FromStr>(name: &str, s: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("{name} '{s}' is not a number"))
    }
    fn list(name: &str, s: &str) -> Result<Vec<usize>, String> {
        s.split_whitespace().map(|x| num(name, x)).collect()
    }
    let op: Op = rec[2].parse()?;
    let (peer, group) = match op {
        Op::Isend | Op::Irecv => (Some(num("peer", &rec[4])?), Vec::new()),
        _ => (None, list("group", &rec[4])?),
    };
    Ok(TraceEvent {
        id: num("id", &rec[0])?,
        rank: num("rank", &rec[1])?,
        op,
        phase: rec[3].parse()?,
        peer,
        group,
        bytes: num("bytes", &rec[5])?,
        elems: num("elems", &rec[6])?,
        round: num("round", &rec[7])?,
        lane: if rec[8].is_empty() { None } else { Some(rec[8].parse()?) },
        deps: list("dep_ids", &rec[9])?,
    })
}

/// Reads a trace written by [`write_trace_csv`]; errors carry 1-based line numbers.
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceEvent>, TraceParseError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if i == 0 {
            let header: Vec<&str> = rec.iter().collect();
            if header.join(",") != TRACE_CSV_HEADER {
                return Err(TraceParseError::Row {
                    line,
                    reason: format!("expected header '{TRACE_CSV_HEADER}'"),
                });
            }
            continue;
        }
        out.push(parse_row(&rec).map_err(|reason| TraceParseError::Row { line, reason })?);
    }
    Ok(out)
}

pub fn trace_csv_string(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(events, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}
