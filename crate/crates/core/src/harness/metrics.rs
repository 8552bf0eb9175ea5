//! Metrics recomputed from the event trace.

use std::collections::BTreeMap;

use serde::Serialize;

use super::scenario::{FlowKind, ScenarioSpec};
use crate::mac::MacCounters;
use crate::net::TraceRecord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSeries {
    pub flow: usize,
    pub kind: FlowKind,
    pub src: u32,
    pub dst: u32,
    /// Goodput per reporting interval, in kb/s.
    pub interval_kbps: Vec<f64>,
    pub mean_kbps: f64,
    pub median_kbps: f64,
    pub max_kbps: f64,
    /// Unique payload bytes delivered over the whole run.
    pub delivered_bytes: u64,
    pub duplicates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RttRecord {
    pub flow: usize,
    pub seq: u32,
    pub sent_ns: u64,
    /// `None` for pings that never came back.
    pub rtt_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCounters {
    pub id: u32,
    pub address: u16,
    pub counters: MacCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub interval_s: f64,
    pub flows: Vec<FlowSeries>,
    pub rtt_records: Vec<RttRecord>,
    /// Over the mean throughputs of non-ping flows.
    pub jain_index: Option<f64>,
    pub counters: Vec<NodeCounters>,
}

impl MetricsReport {
    /// Round-trip times of answered pings, in milliseconds, sorted.
    pub fn rtts_ms(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .rtt_records
            .iter()
            .filter_map(|r| r.rtt_ns.map(|ns| ns as f64 / 1e6))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn pings_lost(&self) -> usize {
        self.rtt_records.iter().filter(|r| r.rtt_ns.is_none()).count()
    }

    /// Fraction of answered pings with an RTT below `ms`.
    pub fn rtt_fraction_below(&self, ms: f64) -> f64 {
        let rtts = self.rtts_ms();
        if rtts.is_empty() {
            return 0.0;
        }
        rtts.iter().filter(|&&r| r < ms).count() as f64 / rtts.len() as f64
    }

    pub fn flow(&self, index: usize) -> Option<&FlowSeries> {
        self.flows.iter().find(|f| f.flow == index)
    }
}

/// `(Σx)² / (n·Σx²)`. `None` when there is nothing to compare.
pub fn jain_index(xs: &[f64]) -> Option<f64> {
    let sum: f64 = xs.iter().sum();
    let sq: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sq == 0.0 {
        return None;
    }
    Some(sum * sum / (xs.len() as f64 * sq))
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Empirical CDF points `(value, fraction ≤ value)`.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect()
}

fn u64_field(r: &TraceRecord, key: &str) -> Option<u64> {
    r.detail.get(key).and_then(|v| v.as_u64())
}

/// Throughput series, RTT records and fairness for `spec`'s flows. Counters
/// are not part of the trace and are left empty.
pub fn compute_metrics(trace: &[TraceRecord], spec: &ScenarioSpec) -> MetricsReport {
    let t_end_ns = (spec.t_end_s * 1e9).round() as u64;
    let interval_ns = (spec.report_interval_s * 1e9).round() as u64;
    let intervals = ((t_end_ns / interval_ns) as usize).max(1);
    let interval_len_s = if t_end_ns < interval_ns {
        spec.t_end_s
    } else {
        spec.report_interval_s
    };

    let n = spec.traffic.len();
    let mut bytes = vec![vec![0u64; intervals]; n];
    let mut totals = vec![0u64; n];
    let mut dups = vec![0u64; n];
    let mut sent: BTreeMap<(usize, u32), u64> = BTreeMap::new();
    let mut answered: BTreeMap<(usize, u32), u64> = BTreeMap::new();

    for r in trace {
        match r.kind {
            "app_rx" => {
                let (Some(flow), Some(len)) = (u64_field(r, "flow"), u64_field(r, "bytes")) else {
                    continue;
                };
                let flow = flow as usize;
                if flow >= n {
                    continue;
                }
                if r.detail.get("dup").and_then(|v| v.as_bool()) == Some(true) {
                    dups[flow] += 1;
                    continue;
                }
                totals[flow] += len;
                let k = (r.time_ns / interval_ns) as usize;
                if k < intervals {
                    bytes[flow][k] += len;
                }
            }
            "ping_req" => {
                if let (Some(flow), Some(seq)) = (u64_field(r, "flow"), u64_field(r, "seq")) {
                    sent.insert((flow as usize, seq as u32), r.time_ns);
                }
            }
            "ping_reply" => {
                if let (Some(flow), Some(seq)) = (u64_field(r, "flow"), u64_field(r, "seq")) {
                    answered.entry((flow as usize, seq as u32)).or_insert(r.time_ns);
                }
            }
            _ => {}
        }
    }

    let flows: Vec<FlowSeries> = spec
        .traffic
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let series: Vec<f64> = bytes[i]
                .iter()
                .map(|&b| b as f64 * 8.0 / interval_len_s / 1e3)
                .collect();
            FlowSeries {
                flow: i,
                kind: f.kind,
                src: f.src,
                dst: f.dst,
                mean_kbps: series.iter().sum::<f64>() / series.len() as f64,
                median_kbps: median(&series),
                max_kbps: series.iter().copied().fold(0.0, f64::max),
                interval_kbps: series,
                delivered_bytes: totals[i],
                duplicates: dups[i],
            }
        })
        .collect();

    let rtt_records = sent
        .iter()
        .map(|(&(flow, seq), &t)| RttRecord {
            flow,
            seq,
            sent_ns: t,
            rtt_ns: answered.get(&(flow, seq)).map(|&a| a - t),
        })
        .collect();

    let means: Vec<f64> = flows
        .iter()
        .filter(|f| f.kind != FlowKind::Ping)
        .map(|f| f.mean_kbps)
        .collect();

    MetricsReport {
        interval_s: interval_len_s,
        jain_index: jain_index(&means),
        flows,
        rtt_records,
        counters: Vec::new(),
    }
}
