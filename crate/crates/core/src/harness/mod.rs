//! Scenario runner and the standard experiments.

pub mod metrics;
pub mod output;
pub mod scenario;
pub mod traffic;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::frame;
use crate::mac::MacParams;
use crate::net::{NetError, Network, TraceRecord};
use crate::sim::{SimDuration, SimTime};
use metrics::{compute_metrics, MetricsReport, NodeCounters};
use scenario::{FlowKind, FlowSpec, ScenarioError, ScenarioSpec};
use traffic::TrafficApp;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failed: {0}")]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Experiment(String),
}

pub struct RunOutput {
    pub spec: ScenarioSpec,
    pub trace: Vec<TraceRecord>,
    pub report: MetricsReport,
    pub events: u64,
}

impl RunOutput {
    pub fn node_ids(&self) -> Vec<u32> {
        self.spec.nodes.iter().map(|n| n.id).collect()
    }
}

/// Runs one scenario to its end time and derives the metrics.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunOutput, HarnessError> {
    spec.validate()?;
    let mut net = Network::new(spec.net_config(true)?)?;
    let mut app = TrafficApp::new(spec);
    let events = net.run(&mut app, SimTime::from_secs_f64(spec.t_end_s))?;
    let trace = net.take_trace();
    let mut report = compute_metrics(&trace, spec);
    report.counters = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeCounters {
            id: n.id,
            address: n.address,
            counters: net.counters(i).clone(),
        })
        .collect();
    Ok(RunOutput {
        spec: spec.clone(),
        trace,
        report,
        events,
    })
}

/// Saturation cycle of one frame: sender preparation, one clear sensing
/// round, switch, DATA, receiver processing, switch, ACK.
pub fn analytic_cycle(mac: &MacParams, switch_latency: SimDuration, payload: usize) -> SimDuration {
    let proc = mac.proc_time(frame::coded_len_for_payload(payload));
    mac.basic_sense_window() + switch_latency + mac.airtime(payload) + switch_latency + mac.ack_airtime() + proc + proc
}

/// Closed-form saturation goodput, in kb/s.
pub fn analytic_throughput_kbps(mac: &MacParams, switch_latency: SimDuration, payload: usize) -> f64 {
    8.0 * payload as f64 / analytic_cycle(mac, switch_latency, payload).as_secs_f64() / 1e3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationTarget {
    pub payload: usize,
    pub kbps: f64,
}

impl std::str::FromStr for CalibrationTarget {
    type Err = String;

    /// `payload:kbps`, e.g. `50:6`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (p, r) = s.split_once(':').ok_or_else(|| format!("expected payload:kbps, got {s:?}"))?;
        Ok(CalibrationTarget {
            payload: p.trim().parse().map_err(|e| format!("bad payload {p:?}: {e}"))?,
            kbps: r.trim().parse().map_err(|e| format!("bad rate {r:?}: {e}"))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub proc_overhead_a_us: f64,
    pub proc_overhead_b_us_per_byte: f64,
}

/// Fits `proc(c) = a + b·c` so the analytic saturation goodput hits both
/// targets. Each cycle carries two processing delays, so
/// `2a + 2b·c_i = 8·P_i / R_i − cycle_i(a = b = 0)`.
pub fn calibrate(
    mac: &MacParams,
    switch_latency: SimDuration,
    targets: [CalibrationTarget; 2],
) -> Result<Calibration, HarnessError> {
    let mut base = mac.clone();
    base.proc_overhead_a = SimDuration::ZERO;
    base.proc_overhead_b_ns = 0.0;
    let mut rows = [(0.0, 0.0); 2];
    for (row, t) in rows.iter_mut().zip(&targets) {
        if !(t.kbps > 0.0) || t.payload == 0 {
            return Err(HarnessError::Experiment(format!("invalid target {t:?}")));
        }
        let cycle = 8.0 * t.payload as f64 / (t.kbps * 1e3);
        let residual = cycle - analytic_cycle(&base, switch_latency, t.payload).as_secs_f64();
        *row = (frame::coded_len_for_payload(t.payload) as f64, residual);
    }
    let [(c1, r1), (c2, r2)] = rows;
    if c1 == c2 {
        return Err(HarnessError::Experiment("targets must differ in coded size".into()));
    }
    let b = (r2 - r1) / (2.0 * (c2 - c1));
    let a = r1 / 2.0 - b * c1;
    if a < 0.0 || b < 0.0 {
        return Err(HarnessError::Experiment(format!(
            "targets need a negative overhead (a = {:.3} ms, b = {:.3} us/byte); they exceed the channel capacity",
            a * 1e3,
            b * 1e6
        )));
    }
    Ok(Calibration {
        proc_overhead_a_us: a * 1e6,
        proc_overhead_b_us_per_byte: b * 1e6,
    })
}

impl Calibration {
    pub fn apply(&self, spec: &mut ScenarioSpec) {
        spec.mac.proc_overhead_a_us = self.proc_overhead_a_us;
        spec.mac.proc_overhead_b_us_per_byte = self.proc_overhead_b_us_per_byte;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaturationPoint {
    pub payload: usize,
    pub throughput_kbps: f64,
    pub oracle_kbps: f64,
}

/// Goodput of the scenario's first flow for each payload size. Points run
/// in parallel; each simulation stays single-threaded.
pub fn run_saturation(spec: &ScenarioSpec, payloads: &[usize]) -> Result<Vec<SaturationPoint>, HarnessError> {
    if spec.traffic.is_empty() {
        return Err(HarnessError::Experiment("scenario has no flow to saturate".into()));
    }
    payloads
        .par_iter()
        .map(|&payload| {
            let mut s = spec.clone();
            for f in &mut s.traffic {
                if f.kind != FlowKind::Ping {
                    f.payload_bytes = Some(payload);
                }
            }
            let out = run_scenario(&s)?;
            let delivered = out.report.flows[0].delivered_bytes;
            let mac = s.mac.to_params();
            let delta = SimDuration::from_micros_f64(s.channel.switch_latency_us);
            Ok(SaturationPoint {
                payload,
                throughput_kbps: delivered as f64 * 8.0 / s.t_end_s / 1e3,
                oracle_kbps: analytic_throughput_kbps(&mac, delta, payload),
            })
        })
        .collect()
}

/// Ping from the first declared node to the second. The run lasts long
/// enough for the last reply to come back.
pub fn run_ping(spec: &ScenarioSpec, ipi_s: f64, count: u64, data_bytes: usize) -> Result<RunOutput, HarnessError> {
    let mut s = two_endpoint_spec(spec)?;
    let (a, b) = (s.nodes[0].id, s.nodes[1].id);
    s.traffic = vec![FlowSpec::ping(a, b, ipi_s, count, data_bytes)];
    s.t_end_s = ipi_s * count as f64 + 30.0;
    run_scenario(&s)
}

/// Saturating datagram stream from the first declared node to the second.
pub fn run_flood(spec: &ScenarioSpec, datagram_bytes: usize, duration_s: f64) -> Result<RunOutput, HarnessError> {
    let mut s = two_endpoint_spec(spec)?;
    let (a, b) = (s.nodes[0].id, s.nodes[1].id);
    let mut flow = FlowSpec::saturation(a, b, datagram_bytes);
    flow.kind = FlowKind::Flood;
    s.traffic = vec![flow];
    s.t_end_s = duration_s;
    run_scenario(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// First node floods the other two, alternating between them.
    Downlink,
    /// Second and third nodes both flood the first.
    Uplink,
}

pub fn run_multipoint(
    spec: &ScenarioSpec,
    direction: Direction,
    datagram_bytes: usize,
    duration_s: f64,
) -> Result<RunOutput, HarnessError> {
    if spec.nodes.len() != 3 {
        return Err(HarnessError::Experiment(format!(
            "multipoint runs need three nodes, got {}",
            spec.nodes.len()
        )));
    }
    let mut s = spec.clone();
    let ids: Vec<u32> = s.nodes.iter().map(|n| n.id).collect();
    let pairs = match direction {
        Direction::Downlink => [(ids[0], ids[1]), (ids[0], ids[2])],
        Direction::Uplink => [(ids[1], ids[0]), (ids[2], ids[0])],
    };
    s.traffic = pairs
        .iter()
        .map(|&(a, b)| FlowSpec {
            kind: FlowKind::Flood,
            ..FlowSpec::saturation(a, b, datagram_bytes)
        })
        .collect();
    s.t_end_s = duration_s;
    run_scenario(&s)
}

fn two_endpoint_spec(spec: &ScenarioSpec) -> Result<ScenarioSpec, HarnessError> {
    if spec.nodes.len() < 2 {
        return Err(HarnessError::Experiment("need at least two nodes".into()));
    }
    Ok(spec.clone())
}

/// Parses `start..end:step` (inclusive end) or a comma-separated list.
pub fn parse_payload_range(s: &str) -> Result<Vec<usize>, String> {
    if let Some((range, step)) = s.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| format!("expected start..end:step, got {s:?}"))?;
        let lo: usize = lo.trim().parse().map_err(|e| format!("bad start: {e}"))?;
        let hi: usize = hi.trim().parse().map_err(|e| format!("bad end: {e}"))?;
        let step: usize = step.trim().parse().map_err(|e| format!("bad step: {e}"))?;
        if step == 0 || lo > hi {
            return Err(format!("empty range {s:?}"));
        }
        Ok((lo..=hi).step_by(step).collect())
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("bad payload {p:?}: {e}")))
            .collect()
    }
}
