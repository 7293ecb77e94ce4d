//! Planning and verification toolkit for distributed Mixture-of-Experts serving.
//!
//! * [`config`] loads and validates model, cluster and workload bundles.
//! * [`strategy`] parses and enumerates hybrid TP/EP/DP/PP strategies.
//! * [`costmodel`] predicts per-strategy latency, queuing and throughput.
//! * [`analyzer`] calibrates coefficients from profiling data and ranks strategies.
//! * [`simcluster`] simulates the fused RS-Combine and AG-Dispatch collectives
//!   and checks them against a dense MoE oracle.
//! * [`timeline`] schedules simulated traces on intra-node, inter-node and
//!   compute lanes and exports Gantt data.

pub mod analyzer;
pub mod config;
pub mod costmodel;
pub mod simcluster;
pub mod strategy;
pub mod timeline;
