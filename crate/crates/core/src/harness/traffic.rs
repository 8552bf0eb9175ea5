//! Traffic generators and sinks.
//!
//! One [`TrafficApp`] drives every flow in a scenario. Everything worth
//! measuring is written to the network trace, so metrics can be recomputed
//! from the trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use super::scenario::{FlowKind, FlowSpec, ScenarioSpec, DATAGRAM_HEADER, PING_HEADER};
use crate::frame::MacFrame;
use crate::mac::{Datagram, MacError};
use crate::net::{Application, Network};
use crate::sim::{SimDuration, SimTime};

pub const PROTO_PING: u16 = 0x0001;
pub const PROTO_DATAGRAM: u16 = 0x0011;

const ECHO_REQUEST: u8 = 8;
const ECHO_REPLY: u8 = 0;

/// Frames a saturating source keeps handed to its MAC.
pub const SATURATION_DEPTH: usize = 2;

#[derive(Debug)]
struct Flow {
    id: u16,
    spec: FlowSpec,
    src: usize,
    dst_addr: u16,
    next_seq: u32,
    start: SimTime,
    stop: Option<SimTime>,
    started: bool,
}

impl Flow {
    fn saturating(&self) -> bool {
        match self.spec.kind {
            FlowKind::Saturation => true,
            FlowKind::Flood => self.spec.rate_bps.is_none(),
            FlowKind::Ping => false,
        }
    }

    fn active(&self, now: SimTime) -> bool {
        self.started
            && self.stop.is_none_or(|s| now < s)
            && self.spec.count.is_none_or(|c| (self.next_seq as u64) < c)
    }

    fn interval(&self) -> SimDuration {
        match self.spec.kind {
            FlowKind::Ping => SimDuration::from_secs_f64(self.spec.ipi_s.expect("validated")),
            _ => {
                let bits = 8.0 * self.spec.frame_payload() as f64;
                SimDuration::from_secs_f64(bits / self.spec.rate_bps.expect("paced flow"))
            }
        }
    }
}

pub fn datagram_payload(flow: u16, seq: u32, len: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(len);
    p.extend_from_slice(&flow.to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    p.resize(len.max(DATAGRAM_HEADER), 0x5A);
    p
}

pub fn parse_datagram(payload: &[u8]) -> Option<(u16, u32)> {
    if payload.len() < DATAGRAM_HEADER {
        return None;
    }
    Some((
        u16::from_be_bytes([payload[0], payload[1]]),
        u32::from_be_bytes([payload[2], payload[3], payload[4], payload[5]]),
    ))
}

fn echo_payload(kind: u8, flow: u16, seq: u32, data_bytes: usize) -> Vec<u8> {
    let mut p = vec![kind, 0];
    p.extend_from_slice(&flow.to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    p.extend((0..data_bytes).map(|i| i as u8));
    p
}

fn parse_echo(payload: &[u8]) -> Option<(u8, u16, u32)> {
    if payload.len() < PING_HEADER {
        return None;
    }
    Some((
        payload[0],
        u16::from_be_bytes([payload[2], payload[3]]),
        u32::from_be_bytes([payload[4], payload[5], payload[6], payload[7]]),
    ))
}

pub struct TrafficApp {
    flows: Vec<Flow>,
    /// Saturating flows per source node, served round-robin.
    saturating: Vec<Vec<usize>>,
    next_rr: Vec<usize>,
    seen: BTreeSet<(u16, u32)>,
    ping_sent: BTreeMap<(u16, u32), SimTime>,
}

impl TrafficApp {
    pub fn new(spec: &ScenarioSpec) -> Self {
        let n = spec.nodes.len();
        let mut saturating = vec![Vec::new(); n];
        let flows: Vec<Flow> = spec
            .traffic
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let src = spec.node_index(f.src).expect("validated");
                let dst = spec.node_index(f.dst).expect("validated");
                let start = SimTime::from_secs_f64(f.start_s);
                Flow {
                    id: i as u16,
                    spec: f.clone(),
                    src,
                    dst_addr: spec.nodes[dst].address,
                    next_seq: 0,
                    start,
                    stop: f.duration_s.map(|d| start + SimDuration::from_secs_f64(d)),
                    started: false,
                }
            })
            .collect();
        for (i, f) in flows.iter().enumerate() {
            if f.saturating() {
                saturating[f.src].push(i);
            }
        }
        TrafficApp {
            flows,
            saturating,
            next_rr: vec![0; n],
            seen: BTreeSet::new(),
            ping_sent: BTreeMap::new(),
        }
    }

    fn send_datagram(&mut self, net: &mut Network, flow: usize) -> Result<(), MacError> {
        let f = &mut self.flows[flow];
        let payload = datagram_payload(f.id, f.next_seq, f.spec.frame_payload());
        net.send(f.src, f.dst_addr, PROTO_DATAGRAM, payload)?;
        f.next_seq += 1;
        Ok(())
    }

    fn send_ping(&mut self, net: &mut Network, flow: usize) {
        let f = &mut self.flows[flow];
        let seq = f.next_seq;
        f.next_seq += 1;
        let payload = echo_payload(ECHO_REQUEST, f.id, seq, f.spec.data_bytes.unwrap_or(56));
        let (id, src, dst) = (f.id, f.src, f.dst_addr);
        net.record(src, "ping_req", json!({"flow": id, "seq": seq}));
        self.ping_sent.insert((id, seq), net.now());
        if net.send(src, dst, PROTO_PING, payload).is_err() {
            net.record(src, "ping_fail", json!({"flow": id, "seq": seq}));
        }
    }

    /// Tops up a node's MAC queue from its saturating flows, taking turns.
    fn refill(&mut self, net: &mut Network, node: usize) {
        let now = net.now();
        while net.outstanding(node) < SATURATION_DEPTH {
            let candidates = &self.saturating[node];
            let k = candidates.len();
            let pick = (0..k)
                .map(|off| (self.next_rr[node] + off) % k)
                .find(|&j| self.flows[candidates[j]].active(now));
            let Some(j) = pick else { return };
            let flow = candidates[j];
            self.next_rr[node] = (j + 1) % k;
            if self.send_datagram(net, flow).is_err() {
                return;
            }
        }
    }

    fn on_flow_timer(&mut self, net: &mut Network, flow: usize) {
        let now = net.now();
        let f = &mut self.flows[flow];
        if !f.started {
            f.started = true;
        }
        if !f.active(now) {
            return;
        }
        if f.saturating() {
            let src = f.src;
            self.refill(net, src);
            return;
        }
        let (src, interval, kind) = (f.src, f.interval(), f.spec.kind);
        match kind {
            FlowKind::Ping => self.send_ping(net, flow),
            _ => {
                if self.send_datagram(net, flow).is_err() {
                    let f = &mut self.flows[flow];
                    net.record(src, "app_drop", json!({"flow": f.id, "seq": f.next_seq}));
                    f.next_seq += 1;
                }
            }
        }
        net.set_timer(src, interval, flow as u64);
    }
}

impl Application for TrafficApp {
    fn start(&mut self, net: &mut Network) {
        for node in 0..net.node_count() {
            net.register_protocol(node, PROTO_PING);
            net.register_protocol(node, PROTO_DATAGRAM);
        }
        let now = net.now();
        for (i, f) in self.flows.iter().enumerate() {
            net.set_timer(f.src, f.start.saturating_since(now), i as u64);
        }
    }

    fn on_timer(&mut self, net: &mut Network, _node: usize, tag: u64) {
        self.on_flow_timer(net, tag as usize);
    }

    fn on_frame_done(&mut self, net: &mut Network, node: usize, _frame: &MacFrame, _acked: bool) {
        self.refill(net, node);
    }

    fn on_deliver(&mut self, net: &mut Network, node: usize, d: Datagram) {
        match d.protocol {
            PROTO_DATAGRAM => {
                let Some((flow, seq)) = parse_datagram(&d.payload) else { return };
                let dup = !self.seen.insert((flow, seq));
                net.record(
                    node,
                    "app_rx",
                    json!({"flow": flow, "seq": seq, "bytes": d.payload.len(), "dup": dup}),
                );
            }
            PROTO_PING => {
                let Some((kind, flow, seq)) = parse_echo(&d.payload) else { return };
                match kind {
                    ECHO_REQUEST => {
                        let mut reply = d.payload.clone();
                        reply[0] = ECHO_REPLY;
                        net.record(node, "ping_echo", json!({"flow": flow, "seq": seq}));
                        if net.send(node, d.peer, PROTO_PING, reply).is_err() {
                            net.record(node, "ping_fail", json!({"flow": flow, "seq": seq}));
                        }
                    }
                    ECHO_REPLY => {
                        // A duplicated reply carries no new sample.
                        if let Some(sent) = self.ping_sent.remove(&(flow, seq)) {
                            let rtt = net.now().saturating_since(sent);
                            net.record(
                                node,
                                "ping_reply",
                                json!({"flow": flow, "seq": seq, "rtt_us": rtt.as_micros_f64()}),
                            );
                        }
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datagram_header_round_trips() {
        let p = datagram_payload(3, 0xDEAD_BEEF, 50);
        assert_eq!(p.len(), 50);
        assert_eq!(parse_datagram(&p), Some((3, 0xDEAD_BEEF)));
        assert_eq!(parse_datagram(&p[..5]), None);
    }

    #[test]
    fn echo_carries_requested_data() {
        let p = echo_payload(ECHO_REQUEST, 1, 9, 10);
        assert_eq!(p.len(), PING_HEADER + 10);
        assert_eq!(parse_echo(&p), Some((ECHO_REQUEST, 1, 9)));
    }
}
