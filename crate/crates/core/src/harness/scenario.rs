//! Scenario files.
//!
//! A scenario is one JSON document. Durations carry their unit in the key
//! (`_us`, `_s`) so the file reads without a schema at hand. Omitted MAC and
//! channel fields fall back to their defaults; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{link_gain, ChannelParams};
use crate::mac::MacParams;
use crate::net::NetConfig;
use crate::sim::SimDuration;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub address: u16,
    /// Position in metres; gains follow from the inverse-square helper.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    /// Gains from this node to every node, in declaration order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_row: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambient: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSpec {
    /// Gain at one metre times m², used with node positions.
    pub g0: f64,
    pub ambient: f64,
    pub noise_sigma: f64,
    pub adc_bits: u32,
    pub full_scale: f64,
    pub switch_latency_us: f64,
    pub intensity_high: f64,
    pub intensity_low: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            g0: 0.36,
            ambient: ChannelParams::DEFAULT_AMBIENT,
            noise_sigma: ChannelParams::DEFAULT_NOISE_SIGMA,
            adc_bits: ChannelParams::DEFAULT_ADC_BITS,
            full_scale: 1.0,
            switch_latency_us: ChannelParams::DEFAULT_SWITCH_LATENCY.as_micros_f64(),
            intensity_high: 1.0,
            intensity_low: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacSpec {
    pub symbol_period_us: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub basic_sense_symbols: u32,
    pub collision_busy_symbols: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ack_timeout_us: Option<f64>,
    pub max_retx: u32,
    pub max_payload: usize,
    pub queue_capacity: usize,
    pub proc_overhead_a_us: f64,
    pub proc_overhead_b_us_per_byte: f64,
}

impl Default for MacSpec {
    fn default() -> Self {
        let d = MacParams::default();
        MacSpec {
            symbol_period_us: d.symbol_period.as_micros_f64(),
            cw_min: d.cw_min,
            cw_max: d.cw_max,
            basic_sense_symbols: d.basic_sense_symbols,
            collision_busy_symbols: d.collision_busy_symbols,
            ack_timeout_us: None,
            max_retx: d.max_retx,
            max_payload: d.max_payload,
            queue_capacity: d.queue_capacity,
            proc_overhead_a_us: 0.0,
            proc_overhead_b_us_per_byte: 0.0,
        }
    }
}

impl MacSpec {
    pub fn to_params(&self) -> MacParams {
        MacParams {
            symbol_period: SimDuration::from_micros_f64(self.symbol_period_us),
            cw_min: self.cw_min,
            cw_max: self.cw_max,
            basic_sense_symbols: self.basic_sense_symbols,
            collision_busy_symbols: self.collision_busy_symbols,
            ack_timeout: self.ack_timeout_us.map(SimDuration::from_micros_f64),
            max_retx: self.max_retx,
            max_payload: self.max_payload,
            queue_capacity: self.queue_capacity,
            proc_overhead_a: SimDuration::from_micros_f64(self.proc_overhead_a_us),
            proc_overhead_b_ns: self.proc_overhead_b_us_per_byte * 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    /// Source queue is never allowed to run empty.
    Saturation,
    /// Echo request/reply pairs at a fixed interval.
    Ping,
    /// Datagram stream, saturating unless `rate_bps` is set.
    Flood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub kind: FlowKind,
    /// Node ids.
    pub src: u32,
    pub dst: u32,
    /// Datagram size for saturation and flood flows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_bytes: Option<usize>,
    /// Echo data carried by each ping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_bytes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipi_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_bps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

/// Datagram header: flow id (u16) and sequence number (u32).
pub const DATAGRAM_HEADER: usize = 6;
/// Echo header: type, code, identifier (u16), sequence (u32).
pub const PING_HEADER: usize = 8;

impl FlowSpec {
    pub fn saturation(src: u32, dst: u32, payload_bytes: usize) -> Self {
        FlowSpec {
            kind: FlowKind::Saturation,
            src,
            dst,
            payload_bytes: Some(payload_bytes),
            data_bytes: None,
            ipi_s: None,
            rate_bps: None,
            count: None,
            start_s: 0.0,
            duration_s: None,
        }
    }

    pub fn ping(src: u32, dst: u32, ipi_s: f64, count: u64, data_bytes: usize) -> Self {
        FlowSpec {
            kind: FlowKind::Ping,
            ipi_s: Some(ipi_s),
            count: Some(count),
            data_bytes: Some(data_bytes),
            payload_bytes: None,
            ..Self::saturation(src, dst, 0)
        }
    }

    /// Bytes handed to the MAC per datagram or echo request.
    pub fn frame_payload(&self) -> usize {
        match self.kind {
            FlowKind::Ping => PING_HEADER + self.data_bytes.unwrap_or(56),
            _ => self.payload_bytes.unwrap_or(1000),
        }
    }
}

fn default_report_interval() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub t_end_s: f64,
    #[serde(default = "default_report_interval")]
    pub report_interval_s: f64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub mac: MacSpec,
    #[serde(default)]
    pub traffic: Vec<FlowSpec>,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioSpec, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let spec: ScenarioSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}

impl ScenarioSpec {
    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.t_end_s > 0.0) {
            return Err(invalid("t_end_s", "must be positive"));
        }
        if !(self.report_interval_s > 0.0) {
            return Err(invalid("report_interval_s", "must be positive"));
        }
        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id) {
                return Err(invalid(format!("nodes[{i}].id"), format!("duplicate id {}", n.id)));
            }
            if !addrs.insert(n.address) {
                return Err(invalid(
                    format!("nodes[{i}].address"),
                    format!("duplicate address {}", n.address),
                ));
            }
            if n.address == crate::frame::BROADCAST {
                return Err(invalid(format!("nodes[{i}].address"), "0xFFFF is reserved for broadcast"));
            }
            match (&n.position, &n.gain_row) {
                (Some(_), Some(_)) => {
                    return Err(invalid(format!("nodes[{i}]"), "give either position or gain_row, not both"))
                }
                (None, None) => return Err(invalid(format!("nodes[{i}]"), "position or gain_row is required")),
                (None, Some(row)) if row.len() != self.nodes.len() => {
                    return Err(invalid(
                        format!("nodes[{i}].gain_row"),
                        format!("expected {} entries, got {}", self.nodes.len(), row.len()),
                    ))
                }
                _ => {}
            }
        }
        let uses_positions = self.nodes.iter().any(|n| n.position.is_some());
        if uses_positions && self.nodes.iter().any(|n| n.position.is_none()) {
            return Err(invalid("nodes", "positions and gain rows cannot be mixed"));
        }
        for (i, f) in self.traffic.iter().enumerate() {
            let path = |field: &str| format!("traffic[{i}].{field}");
            let src = self
                .node_index(f.src)
                .ok_or_else(|| invalid(path("src"), format!("undeclared node {}", f.src)))?;
            let dst = self
                .node_index(f.dst)
                .ok_or_else(|| invalid(path("dst"), format!("undeclared node {}", f.dst)))?;
            if src == dst {
                return Err(invalid(path("dst"), "source and destination must differ"));
            }
            let size = f.frame_payload();
            match f.kind {
                FlowKind::Ping => {
                    if !f.ipi_s.is_some_and(|v| v > 0.0) {
                        return Err(invalid(path("ipi_s"), "ping flows need a positive ipi_s"));
                    }
                }
                _ => {
                    if size < DATAGRAM_HEADER {
                        return Err(invalid(
                            path("payload_bytes"),
                            format!("must be at least {DATAGRAM_HEADER} bytes"),
                        ));
                    }
                    if let Some(r) = f.rate_bps {
                        if !(r > 0.0) {
                            return Err(invalid(path("rate_bps"), "must be positive"));
                        }
                    }
                }
            }
            if size > self.mac.max_payload {
                return Err(invalid(
                    path("payload_bytes"),
                    format!("{size} bytes exceed max_payload {}", self.mac.max_payload),
                ));
            }
            if f.start_s < 0.0 {
                return Err(invalid(path("start_s"), "must be non-negative"));
            }
        }
        self.mac
            .to_params()
            .validate()
            .map_err(|e| invalid("mac", e.to_string()))?;
        self.channel_params()
            .map_err(|e| invalid("channel", e.to_string()))?
            .validate(self.mac.to_params().symbol_period)
            .map_err(|e| invalid("channel", e.to_string()))?;
        Ok(())
    }

    pub fn channel_params(&self) -> Result<ChannelParams, crate::channel::ChannelError> {
        let n = self.nodes.len();
        let mut gain = vec![vec![0.0; n]; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for j in 0..n {
                if i == j {
                    continue;
                }
                gain[i][j] = match (&node.position, &node.gain_row) {
                    (Some(p), _) => {
                        let q = self.nodes[j].position.unwrap_or(*p);
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                        link_gain(d, self.channel.g0)?
                    }
                    (None, Some(row)) => row[j],
                    (None, None) => 0.0,
                };
            }
        }
        let c = &self.channel;
        Ok(ChannelParams {
            ambient: self.nodes.iter().map(|n| n.ambient.unwrap_or(c.ambient)).collect(),
            noise_sigma: self.nodes.iter().map(|n| n.noise_sigma.unwrap_or(c.noise_sigma)).collect(),
            gain,
            adc_bits: c.adc_bits,
            full_scale: c.full_scale,
            switch_latency: SimDuration::from_micros_f64(c.switch_latency_us),
            intensity_high: c.intensity_high,
            intensity_low: c.intensity_low,
        })
    }

    pub fn net_config(&self, trace: bool) -> Result<NetConfig, ScenarioError> {
        Ok(NetConfig {
            mac: self.mac.to_params(),
            channel: self.channel_params().map_err(|e| invalid("channel", e.to_string()))?,
            addresses: self.nodes.iter().map(|n| n.address).collect(),
            seed: self.seed,
            trace,
        })
    }

    /// Two nodes 0.6 m apart with one saturation flow, the reference bench
    /// setup.
    pub fn two_node(payload_bytes: usize, t_end_s: f64) -> Self {
        ScenarioSpec {
            name: "two-node".into(),
            seed: 1,
            t_end_s,
            report_interval_s: 10.0,
            nodes: vec![
                NodeSpec {
                    id: 1,
                    address: 1,
                    position: Some([0.0, 0.0, 0.0]),
                    gain_row: None,
                    ambient: None,
                    noise_sigma: None,
                },
                NodeSpec {
                    id: 2,
                    address: 2,
                    position: Some([0.6, 0.0, 0.0]),
                    gain_row: None,
                    ambient: None,
                    noise_sigma: None,
                },
            ],
            channel: ChannelSpec::default(),
            mac: MacSpec::default(),
            traffic: vec![FlowSpec::saturation(1, 2, payload_bytes)],
        }
    }
}
