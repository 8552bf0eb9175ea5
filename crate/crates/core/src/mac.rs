//! CSMA/CD medium access.
//!
//! [`MacNode`] is a pure state machine: the simulator feeds it
//! [`MacEvent`]s and carries out the [`MacAction`]s it returns. Channel
//! access runs as
//!
//! ```text
//! IDLE -> (prep) -> BASIC_SENSE --clear--> TX_DATA -> AWAIT_ACK --ack--> IDLE
//!                        |busy                 |collision      |timeout
//!                        v                     v               v
//!                     BACKOFF  <-------- retry or drop --------+
//! ```
//!
//! Receiving a DATA frame overlays that flow: the node processes the frame
//! (`RX`), answers unicast frames with an ACK (`TX_ACK`), then resumes
//! whatever channel access it had paused.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, Medium};
use crate::frame::{self, MacFrame, BROADCAST};
use crate::phy::{slice_sample, Symbol};
use crate::sim::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacError {
    #[error("transmit queue is full")]
    QueueFull,
    #[error("payload of {len} bytes exceeds the maximum of {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("empty payloads are reserved for ACK frames")]
    InvalidPayload,
    #[error("carrier sensing attempted while the LED is not receiving")]
    HalfDuplexViolation,
    #[error("event {event} is not legal in phase {phase:?}")]
    IllegalEvent { phase: Phase, event: &'static str },
    #[error("invalid MAC parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Channel(ChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacParams {
    pub symbol_period: SimDuration,
    pub cw_min: u32,
    pub cw_max: u32,
    /// Width of one basic-sensing round, in symbols.
    pub basic_sense_symbols: u32,
    /// Consecutive busy fast-sense results that abort a transmission.
    pub collision_busy_symbols: u32,
    /// Fixed ACK timeout. `None` derives one per frame from the ACK airtime,
    /// switching latency and processing overhead.
    pub ack_timeout: Option<SimDuration>,
    pub max_retx: u32,
    pub max_payload: usize,
    /// Frames a node holds at once, the one in service included.
    pub queue_capacity: usize,
    /// Fixed part of the per-frame driver processing time.
    pub proc_overhead_a: SimDuration,
    /// Processing time per coded byte, in nanoseconds.
    pub proc_overhead_b_ns: f64,
}

impl Default for MacParams {
    fn default() -> Self {
        MacParams {
            symbol_period: SimDuration::from_micros(20),
            cw_min: 4,
            cw_max: 64,
            basic_sense_symbols: 16,
            collision_busy_symbols: 4,
            ack_timeout: None,
            max_retx: 3,
            max_payload: frame::DEFAULT_MAX_PAYLOAD,
            queue_capacity: 64,
            proc_overhead_a: SimDuration::ZERO,
            proc_overhead_b_ns: 0.0,
        }
    }
}

impl MacParams {
    pub fn validate(&self) -> Result<(), MacError> {
        let bad = |m: String| Err(MacError::InvalidParams(m));
        if self.symbol_period == SimDuration::ZERO {
            return bad("symbol_period must be positive".into());
        }
        if self.cw_min < 2 || !self.cw_min.is_power_of_two() {
            return bad(format!("cw_min must be a power of two >= 2, got {}", self.cw_min));
        }
        if !self.cw_max.is_power_of_two() || self.cw_max < self.cw_min {
            return bad(format!(
                "cw_max must be a power of two >= cw_min, got {}",
                self.cw_max
            ));
        }
        if self.basic_sense_symbols == 0 {
            return bad("basic_sense_symbols must be at least 1".into());
        }
        if self.collision_busy_symbols == 0 {
            return bad("collision_busy_symbols must be at least 1".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1".into());
        }
        if self.max_payload == 0 || self.max_payload > u16::MAX as usize {
            return bad(format!("max_payload out of range: {}", self.max_payload));
        }
        if !self.proc_overhead_b_ns.is_finite() || self.proc_overhead_b_ns < 0.0 {
            return bad("proc_overhead_b must be non-negative".into());
        }
        Ok(())
    }

    /// Driver time spent on a frame of `coded_bytes`.
    pub fn proc_time(&self, coded_bytes: usize) -> SimDuration {
        let per_byte = (self.proc_overhead_b_ns * coded_bytes as f64).round() as u64;
        self.proc_overhead_a + SimDuration::from_nanos(per_byte)
    }

    pub fn airtime(&self, payload_len: usize) -> SimDuration {
        self.symbol_period.times(frame::frame_symbol_count(payload_len) as u64)
    }

    pub fn ack_airtime(&self) -> SimDuration {
        self.airtime(0)
    }

    pub fn basic_sense_window(&self) -> SimDuration {
        self.symbol_period.times(self.basic_sense_symbols as u64)
    }

    pub fn ack_timeout_for(&self, frame: &MacFrame, switch_latency: SimDuration) -> SimDuration {
        self.ack_timeout.unwrap_or_else(|| {
            let one_way = self.ack_airtime() + switch_latency.times(2) + self.proc_time(frame.coded_len());
            one_way.times(2)
        })
    }
}

/// Externally visible phase, one of the seven protocol states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    BasicSense,
    Backoff,
    TxData,
    AwaitAck,
    Rx,
    TxAck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SenseOutcome {
    Clear,
    Busy,
}

/// Host-facing unit of data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datagram {
    pub peer: u16,
    pub protocol: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RxFailure {
    /// No preamble and delimiter were found.
    NoSync,
    /// A Reed-Solomon block could not be repaired, or the body was malformed.
    Rs,
    Crc,
    /// The LED was not receiving for the whole frame.
    Missed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MacEvent {
    PrepDone,
    SenseResult(SenseOutcome),
    DataTxDone,
    CollisionDetected,
    AckTimeout,
    FrameReceived { frame: MacFrame, coded_bytes: usize },
    ReceptionFailed { reason: RxFailure, coded_bytes: Option<usize> },
    RxProcDone,
    AckTxDone,
}

impl MacEvent {
    fn name(&self) -> &'static str {
        match self {
            MacEvent::PrepDone => "PrepDone",
            MacEvent::SenseResult(_) => "SenseResult",
            MacEvent::DataTxDone => "DataTxDone",
            MacEvent::CollisionDetected => "CollisionDetected",
            MacEvent::AckTimeout => "AckTimeout",
            MacEvent::FrameReceived { .. } => "FrameReceived",
            MacEvent::ReceptionFailed { .. } => "ReceptionFailed",
            MacEvent::RxProcDone => "RxProcDone",
            MacEvent::AckTxDone => "AckTxDone",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MacAction {
    /// Run frame preparation for this long, then report `PrepDone`.
    StartPrep(SimDuration),
    /// Run one basic-sensing round and report `SenseResult`.
    StartBasicSense,
    /// Abandon the sensing round in progress without reporting it.
    StopSensing,
    TransmitData(MacFrame),
    ArmAckTimer(SimDuration),
    CancelAckTimer,
    StartRxProcessing(SimDuration),
    TransmitAck(MacFrame),
    Deliver(Datagram),
    BackoffDrawn(u32),
    FrameAcked(MacFrame),
    FrameDropped(MacFrame),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounters {
    pub submitted: u64,
    pub acked: u64,
    pub tx_data: u64,
    pub tx_ack: u64,
    pub retx: u64,
    pub drops: u64,
    pub queue_full: u64,
    pub collisions_detected: u64,
    pub ack_timeouts: u64,
    pub rx_ok: u64,
    pub rx_overheard: u64,
    pub rx_crc_fail: u64,
    pub rx_rs_fail: u64,
    pub rx_no_sync: u64,
    pub rx_missed: u64,
    pub rx_busy_drop: u64,
    pub rx_unknown_proto: u64,
    pub delivered_up: u64,
    pub duplicates: u64,
}

/// Snapshot of the protocol state.
#[derive(Debug, Clone, PartialEq)]
pub struct MacState {
    pub phase: Phase,
    pub cw: u32,
    pub backoff_counter: u32,
    pub retx_count: u32,
    pub queued: usize,
    pub current_frame: Option<MacFrame>,
}

#[derive(Debug, Clone, PartialEq)]
enum Access {
    Idle,
    Prep,
    Sensing,
    Backoff { counter: u32 },
    TxData,
    AwaitAck,
}

#[derive(Debug, Clone, PartialEq)]
enum Overlay {
    None,
    Processing {
        ack: Option<MacFrame>,
        deliver: Option<MacFrame>,
    },
    SendingAck {
        deliver: Option<MacFrame>,
    },
}

/// Uniform integer in `[1, cw - 1]`.
pub fn draw_backoff<R: Rng + ?Sized>(cw: u32, rng: &mut R) -> u32 {
    assert!(cw >= 2, "contention window must be at least 2");
    rng.random_range(1..cw)
}

/// ACK answering `received`, sent by `self_addr`.
pub fn build_ack(received: &MacFrame, self_addr: u16) -> MacFrame {
    MacFrame::ack(received.src, self_addr, received.protocol)
}

/// Threshold used before any preamble has been heard.
pub fn fallback_threshold(full_scale_counts: u16) -> f64 {
    full_scale_counts as f64 / 2.0
}

fn map_sample_error(e: ChannelError) -> MacError {
    match e {
        ChannelError::NotInRxMode { .. } => MacError::HalfDuplexViolation,
        other => MacError::Channel(other),
    }
}

/// Reads `symbols` consecutive symbol slots starting at `window_start`,
/// sampling mid-slot. Busy if any slot slices HIGH.
pub fn basic_sense<M: Medium + ?Sized>(
    medium: &M,
    node: usize,
    window_start: SimTime,
    symbols: u32,
    symbol_period: SimDuration,
    threshold: f64,
) -> Result<SenseOutcome, MacError> {
    let half = SimDuration::from_nanos(symbol_period.as_nanos() / 2);
    let mut busy = false;
    for k in 0..symbols as u64 {
        let t = window_start + symbol_period.times(k) + half;
        let sample = medium.sample(node, t).map_err(map_sample_error)?;
        busy |= slice_sample(sample, threshold) == Symbol::High;
    }
    Ok(if busy { SenseOutcome::Busy } else { SenseOutcome::Clear })
}

/// One-sample sense, taken by a transmitter inside its own LOW symbol.
pub fn fast_sense<M: Medium + ?Sized>(
    medium: &M,
    node: usize,
    t: SimTime,
    threshold: f64,
) -> Result<SenseOutcome, MacError> {
    let sample = medium.sample(node, t).map_err(map_sample_error)?;
    Ok(match slice_sample(sample, threshold) {
        Symbol::High => SenseOutcome::Busy,
        Symbol::Low => SenseOutcome::Clear,
    })
}

#[derive(Debug, Clone)]
pub struct MacNode {
    addr: u16,
    params: MacParams,
    switch_latency: SimDuration,
    access: Access,
    overlay: Overlay,
    sensing: bool,
    cw: u32,
    retx_count: u32,
    queue: VecDeque<MacFrame>,
    current: Option<MacFrame>,
    protocols: BTreeSet<u16>,
    last_from: BTreeMap<u16, u64>,
    counters: MacCounters,
}

impl MacNode {
    pub fn new(addr: u16, params: MacParams, switch_latency: SimDuration) -> Result<Self, MacError> {
        params.validate()?;
        Ok(MacNode {
            addr,
            cw: params.cw_min,
            params,
            switch_latency,
            access: Access::Idle,
            overlay: Overlay::None,
            sensing: false,
            retx_count: 0,
            queue: VecDeque::new(),
            current: None,
            protocols: BTreeSet::new(),
            last_from: BTreeMap::new(),
            counters: MacCounters::default(),
        })
    }

    pub fn addr(&self) -> u16 {
        self.addr
    }

    pub fn params(&self) -> &MacParams {
        &self.params
    }

    pub fn counters(&self) -> &MacCounters {
        &self.counters
    }

    pub fn register_protocol(&mut self, protocol: u16) {
        self.protocols.insert(protocol);
    }

    pub fn cw(&self) -> u32 {
        self.cw
    }

    pub fn retx_count(&self) -> u32 {
        self.retx_count
    }

    /// Frames queued or in service.
    pub fn outstanding(&self) -> usize {
        self.queue.len() + self.current.is_some() as usize
    }

    pub fn phase(&self) -> Phase {
        match self.overlay {
            Overlay::Processing { .. } => Phase::Rx,
            Overlay::SendingAck { .. } => Phase::TxAck,
            Overlay::None => match self.access {
                Access::Idle | Access::Prep => Phase::Idle,
                Access::Sensing => Phase::BasicSense,
                Access::Backoff { .. } => Phase::Backoff,
                Access::TxData => Phase::TxData,
                Access::AwaitAck => Phase::AwaitAck,
            },
        }
    }

    pub fn state(&self) -> MacState {
        MacState {
            phase: self.phase(),
            cw: self.cw,
            backoff_counter: match self.access {
                Access::Backoff { counter } => counter,
                _ => 0,
            },
            retx_count: self.retx_count,
            queued: self.queue.len(),
            current_frame: self.current.clone(),
        }
    }

    /// Enqueues a datagram for `dst`. Kicks off channel access when idle.
    pub fn host_send(&mut self, dst: u16, protocol: u16, payload: Vec<u8>) -> Result<Vec<MacAction>, MacError> {
        if payload.is_empty() {
            return Err(MacError::InvalidPayload);
        }
        if payload.len() > self.params.max_payload {
            return Err(MacError::PayloadTooLarge {
                len: payload.len(),
                max: self.params.max_payload,
            });
        }
        if self.outstanding() >= self.params.queue_capacity {
            self.counters.queue_full += 1;
            return Err(MacError::QueueFull);
        }
        self.counters.submitted += 1;
        self.queue.push_back(MacFrame::data(dst, self.addr, protocol, payload));
        let mut actions = Vec::new();
        if self.access == Access::Idle {
            self.start_next(&mut actions);
        }
        Ok(actions)
    }

    pub fn transition<R: Rng + ?Sized>(&mut self, event: MacEvent, rng: &mut R) -> Result<Vec<MacAction>, MacError> {
        let mut actions = Vec::new();
        let illegal = |node: &MacNode, ev: &MacEvent| MacError::IllegalEvent {
            phase: node.phase(),
            event: ev.name(),
        };
        match event {
            MacEvent::PrepDone => {
                if self.access != Access::Prep {
                    return Err(illegal(self, &event));
                }
                self.access = Access::Sensing;
                self.resume(&mut actions);
            }
            MacEvent::SenseResult(outcome) => {
                if !self.sensing || self.overlay != Overlay::None {
                    return Err(illegal(self, &event));
                }
                self.sensing = false;
                match (&self.access, outcome) {
                    (Access::Sensing, SenseOutcome::Clear) => self.begin_tx(&mut actions),
                    (Access::Sensing, SenseOutcome::Busy) => {
                        let counter = draw_backoff(self.cw, rng);
                        self.access = Access::Backoff { counter };
                        actions.push(MacAction::BackoffDrawn(counter));
                        self.resume(&mut actions);
                    }
                    (Access::Backoff { counter }, SenseOutcome::Clear) => {
                        let left = counter - 1;
                        if left == 0 {
                            self.begin_tx(&mut actions);
                        } else {
                            self.access = Access::Backoff { counter: left };
                            self.resume(&mut actions);
                        }
                    }
                    (Access::Backoff { .. }, SenseOutcome::Busy) => self.resume(&mut actions),
                    _ => return Err(illegal(self, &event)),
                }
            }
            MacEvent::DataTxDone => {
                if self.access != Access::TxData {
                    return Err(illegal(self, &event));
                }
                let frame = self.current.as_ref().expect("frame in service");
                if frame.dst == BROADCAST {
                    self.succeed(&mut actions);
                } else {
                    let timeout = self.params.ack_timeout_for(frame, self.switch_latency);
                    self.access = Access::AwaitAck;
                    actions.push(MacAction::ArmAckTimer(timeout));
                }
            }
            MacEvent::CollisionDetected => {
                if self.access != Access::TxData {
                    return Err(illegal(self, &event));
                }
                self.counters.collisions_detected += 1;
                self.fail_attempt(&mut actions);
            }
            MacEvent::AckTimeout => return self.handle_ack_timeout(),
            MacEvent::FrameReceived { frame, coded_bytes } => {
                self.on_frame(frame, coded_bytes, &mut actions);
            }
            MacEvent::ReceptionFailed { reason, coded_bytes } => {
                match reason {
                    RxFailure::NoSync => self.counters.rx_no_sync += 1,
                    RxFailure::Rs => self.counters.rx_rs_fail += 1,
                    RxFailure::Crc => self.counters.rx_crc_fail += 1,
                    RxFailure::Missed => self.counters.rx_missed += 1,
                }
                // A failed frame still costs decoding time if it looked like DATA.
                if let Some(coded) = coded_bytes {
                    if coded > frame::coded_len_for_payload(0) && self.overlay == Overlay::None {
                        self.enter_processing(None, None, coded, &mut actions);
                    }
                }
            }
            MacEvent::RxProcDone => {
                let Overlay::Processing { ack, deliver } = std::mem::replace(&mut self.overlay, Overlay::None) else {
                    return Err(illegal(self, &event));
                };
                match ack {
                    Some(ack) => {
                        self.counters.tx_ack += 1;
                        self.overlay = Overlay::SendingAck { deliver };
                        actions.push(MacAction::TransmitAck(ack));
                    }
                    None => {
                        if let Some(frame) = deliver {
                            self.deliver_into(frame, &mut actions);
                        }
                        self.resume(&mut actions);
                    }
                }
            }
            MacEvent::AckTxDone => {
                let Overlay::SendingAck { deliver } = std::mem::replace(&mut self.overlay, Overlay::None) else {
                    return Err(illegal(self, &event));
                };
                if let Some(frame) = deliver {
                    self.deliver_into(frame, &mut actions);
                }
                self.resume(&mut actions);
            }
        }
        Ok(actions)
    }

    /// ACK timer expiry: count a failed attempt, double CW (capped), and
    /// either retry or drop the frame once `max_retx` retries are spent.
    pub fn handle_ack_timeout(&mut self) -> Result<Vec<MacAction>, MacError> {
        if self.access != Access::AwaitAck {
            return Err(MacError::IllegalEvent {
                phase: self.phase(),
                event: "AckTimeout",
            });
        }
        let mut actions = Vec::new();
        self.counters.ack_timeouts += 1;
        self.fail_attempt(&mut actions);
        Ok(actions)
    }

    /// Hands a received frame to its protocol handler, if one is registered.
    pub fn deliver_up(&mut self, frame: MacFrame) -> Option<Datagram> {
        if !self.protocols.contains(&frame.protocol) {
            self.counters.rx_unknown_proto += 1;
            return None;
        }
        self.counters.delivered_up += 1;
        Some(Datagram {
            peer: frame.src,
            protocol: frame.protocol,
            payload: frame.payload,
        })
    }

    fn deliver_into(&mut self, frame: MacFrame, actions: &mut Vec<MacAction>) {
        if let Some(d) = self.deliver_up(frame) {
            actions.push(MacAction::Deliver(d));
        }
    }

    fn start_next(&mut self, actions: &mut Vec<MacAction>) {
        debug_assert!(self.current.is_none());
        if let Some(frame) = self.queue.pop_front() {
            actions.push(MacAction::StartPrep(self.params.proc_time(frame.coded_len())));
            self.current = Some(frame);
            self.access = Access::Prep;
        } else {
            self.access = Access::Idle;
        }
    }

    fn begin_tx(&mut self, actions: &mut Vec<MacAction>) {
        self.access = Access::TxData;
        self.counters.tx_data += 1;
        actions.push(MacAction::TransmitData(self.current.clone().expect("frame in service")));
    }

    /// Restarts sensing if access wants it and nothing blocks it.
    fn resume(&mut self, actions: &mut Vec<MacAction>) {
        let wants = matches!(self.access, Access::Sensing | Access::Backoff { .. });
        if wants && !self.sensing && self.overlay == Overlay::None {
            self.sensing = true;
            actions.push(MacAction::StartBasicSense);
        }
    }

    fn succeed(&mut self, actions: &mut Vec<MacAction>) {
        self.counters.acked += 1;
        self.cw = self.params.cw_min;
        self.retx_count = 0;
        let frame = self.current.take().expect("frame in service");
        actions.push(MacAction::FrameAcked(frame));
        self.start_next(actions);
    }

    fn fail_attempt(&mut self, actions: &mut Vec<MacAction>) {
        self.retx_count += 1;
        self.cw = (self.cw * 2).min(self.params.cw_max);
        if self.retx_count > self.params.max_retx {
            self.counters.drops += 1;
            self.cw = self.params.cw_min;
            self.retx_count = 0;
            let frame = self.current.take().expect("frame in service");
            actions.push(MacAction::FrameDropped(frame));
            self.start_next(actions);
        } else {
            self.counters.retx += 1;
            self.access = Access::Sensing;
            self.resume(actions);
        }
    }

    fn enter_processing(
        &mut self,
        ack: Option<MacFrame>,
        deliver: Option<MacFrame>,
        coded_bytes: usize,
        actions: &mut Vec<MacAction>,
    ) {
        if self.sensing {
            self.sensing = false;
            actions.push(MacAction::StopSensing);
        }
        self.overlay = Overlay::Processing { ack, deliver };
        actions.push(MacAction::StartRxProcessing(self.params.proc_time(coded_bytes)));
    }

    fn on_frame(&mut self, frame: MacFrame, coded_bytes: usize, actions: &mut Vec<MacAction>) {
        if frame.is_ack() {
            let expected = self.access == Access::AwaitAck
                && frame.dst == self.addr
                && self.current.as_ref().is_some_and(|c| c.dst == frame.src);
            if expected {
                actions.push(MacAction::CancelAckTimer);
                self.succeed(actions);
            }
            return;
        }
        if self.overlay != Overlay::None {
            self.counters.rx_busy_drop += 1;
            return;
        }
        let unicast = frame.dst == self.addr;
        if !unicast && frame.dst != BROADCAST {
            self.counters.rx_overheard += 1;
            self.enter_processing(None, None, coded_bytes, actions);
            return;
        }
        self.counters.rx_ok += 1;
        if unicast {
            let fingerprint = {
                let mut h = DefaultHasher::new();
                (frame.protocol, &frame.payload).hash(&mut h);
                h.finish()
            };
            if self.last_from.insert(frame.src, fingerprint) == Some(fingerprint) {
                self.counters.duplicates += 1;
            }
        }
        let ack = unicast.then(|| build_ack(&frame, self.addr));
        self.enter_processing(ack, Some(frame), coded_bytes, actions);
    }
}
