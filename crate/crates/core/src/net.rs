//! A network of MAC nodes sharing one optical channel.
//!
//! [`Network`] owns the event queue, the channel and one [`MacNode`] per
//! station, and carries out the actions the state machines request: timers,
//! sensing rounds, emissions and frame decoding. Traffic comes from an
//! [`Application`], which is called back on deliveries and its own timers.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::channel::{ChannelError, ChannelParams, EmissionId, LedMode, ModeStatus, OpticalChannel};
use crate::frame::{self, FrameError, MacFrame};
use crate::mac::{
    self, Datagram, MacAction, MacCounters, MacError, MacEvent, MacNode, MacParams, RxFailure, SenseOutcome,
};
use crate::phy::{self, AdcSample, Symbol};
use crate::sim::{EventHandle, EventQueue, RngStreams, SimDuration, SimTime, StreamPurpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("invalid network configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub mac: MacParams,
    pub channel: ChannelParams,
    /// MAC address of each node, indexed like the gain matrix.
    pub addresses: Vec<u16>,
    pub seed: u64,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub node: usize,
    pub kind: &'static str,
    pub detail: Value,
}

/// Traffic source and sink driven by the network.
pub trait Application {
    fn start(&mut self, _net: &mut Network) {}
    fn on_timer(&mut self, _net: &mut Network, _node: usize, _tag: u64) {}
    fn on_deliver(&mut self, _net: &mut Network, _node: usize, _datagram: Datagram) {}
    /// The MAC finished with a frame: acknowledged (or broadcast) when
    /// `acked`, dropped otherwise.
    fn on_frame_done(&mut self, _net: &mut Network, _node: usize, _frame: &MacFrame, _acked: bool) {}
}

/// Application that generates no traffic.
pub struct Silent;

impl Application for Silent {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxKind {
    Data,
    Ack,
}

#[derive(Debug, Clone)]
enum Ev {
    PrepDone(usize),
    SenseEnd(usize),
    EmissionStart(usize),
    EmissionEnd(usize),
    Abort(usize),
    AckTimeout(usize),
    RxProcDone(usize),
    RxEnd { node: usize, emission: EmissionId },
    AppTimer { node: usize, tag: u64 },
}

#[derive(Debug)]
struct PendingTx {
    kind: TxKind,
    symbols: Arc<[Symbol]>,
    frame: MacFrame,
}

#[derive(Debug)]
struct ActiveTx {
    kind: TxKind,
    id: EmissionId,
    end: EventHandle,
    abort: Option<(SimTime, EventHandle)>,
}

#[derive(Debug)]
struct Station {
    mac: MacNode,
    backoff_rng: ChaCha8Rng,
    threshold: Option<f64>,
    sense: Option<(SimTime, EventHandle)>,
    pending_tx: Option<PendingTx>,
    tx: Option<ActiveTx>,
    rx: Option<(EmissionId, EventHandle)>,
    ack_timer: Option<EventHandle>,
}

enum Notice {
    Deliver(usize, Datagram),
    FrameDone(usize, MacFrame, bool),
    Timer(usize, u64),
}

pub struct Network {
    queue: EventQueue<Ev>,
    channel: OpticalChannel,
    params: MacParams,
    stations: Vec<Station>,
    notices: Vec<Notice>,
    trace: Option<Vec<TraceRecord>>,
    events: u64,
}

fn frame_kind(f: &MacFrame) -> &'static str {
    if f.is_ack() {
        "ACK"
    } else {
        "DATA"
    }
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.mac.validate()?;
        let n = config.channel.node_count();
        if config.addresses.len() != n {
            return Err(NetError::Config(format!(
                "{} addresses for {} nodes",
                config.addresses.len(),
                n
            )));
        }
        let mut sorted = config.addresses.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(NetError::Config("node addresses must be unique".into()));
        }
        if config.addresses.contains(&frame::BROADCAST) {
            return Err(NetError::Config("0xFFFF is the broadcast address".into()));
        }
        let switch_latency = config.channel.switch_latency;
        let channel = OpticalChannel::new(config.channel, config.mac.symbol_period, config.seed)?;
        let streams = RngStreams::new(config.seed);
        let stations = config
            .addresses
            .iter()
            .enumerate()
            .map(|(i, &addr)| {
                Ok(Station {
                    mac: MacNode::new(addr, config.mac.clone(), switch_latency)?,
                    backoff_rng: streams.substream(i, StreamPurpose::Backoff),
                    threshold: None,
                    sense: None,
                    pending_tx: None,
                    tx: None,
                    rx: None,
                    ack_timer: None,
                })
            })
            .collect::<Result<Vec<_>, MacError>>()?;
        Ok(Network {
            queue: EventQueue::new(),
            channel,
            params: config.mac,
            stations,
            notices: Vec::new(),
            trace: config.trace.then(Vec::new),
            events: 0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn node_count(&self) -> usize {
        self.stations.len()
    }

    pub fn mac_params(&self) -> &MacParams {
        &self.params
    }

    pub fn channel(&self) -> &OpticalChannel {
        &self.channel
    }

    pub fn mac(&self, node: usize) -> &MacNode {
        &self.stations[node].mac
    }

    pub fn counters(&self, node: usize) -> &MacCounters {
        self.stations[node].mac.counters()
    }

    pub fn address(&self, node: usize) -> u16 {
        self.stations[node].mac.addr()
    }

    pub fn node_of(&self, addr: u16) -> Option<usize> {
        self.stations.iter().position(|s| s.mac.addr() == addr)
    }

    pub fn register_protocol(&mut self, node: usize, protocol: u16) {
        self.stations[node].mac.register_protocol(protocol);
    }

    pub fn outstanding(&self, node: usize) -> usize {
        self.stations[node].mac.outstanding()
    }

    pub fn events_dispatched(&self) -> u64 {
        self.events
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn record(&mut self, node: usize, kind: &'static str, detail: Value) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                time_ns: self.queue.now().as_nanos(),
                node,
                kind,
                detail,
            });
        }
    }

    /// Submits a datagram at `node` for `dst`.
    pub fn send(&mut self, node: usize, dst: u16, protocol: u16, payload: Vec<u8>) -> Result<(), MacError> {
        let len = payload.len();
        match self.stations[node].mac.host_send(dst, protocol, payload) {
            Ok(actions) => {
                self.record(node, "submit", json!({"dst": dst, "protocol": protocol, "len": len}));
                self.execute(node, actions)
                    .map_err(|e| match e {
                        NetError::Mac(m) => m,
                        other => panic!("channel rejected a MAC action: {other}"),
                    })
            }
            Err(e) => {
                self.record(node, "reject", json!({"dst": dst, "len": len, "error": e.to_string()}));
                Err(e)
            }
        }
    }

    pub fn set_timer(&mut self, node: usize, delay: SimDuration, tag: u64) {
        self.queue.schedule(delay, Ev::AppTimer { node, tag });
    }

    /// Runs every event up to and including `t_end`.
    pub fn run_until<A: Application + ?Sized>(&mut self, app: &mut A, t_end: SimTime) -> Result<u64, NetError> {
        let mut count = 0;
        self.flush(app);
        while let Some(ev) = self.queue.pop_due(t_end) {
            self.dispatch(ev.kind)?;
            count += 1;
            self.flush(app);
        }
        self.queue.advance_to(t_end);
        self.events += count;
        Ok(count)
    }

    /// Starts `app` and runs to `t_end`.
    pub fn run<A: Application + ?Sized>(&mut self, app: &mut A, t_end: SimTime) -> Result<u64, NetError> {
        app.start(self);
        self.run_until(app, t_end)
    }

    fn flush<A: Application + ?Sized>(&mut self, app: &mut A) {
        while !self.notices.is_empty() {
            for notice in std::mem::take(&mut self.notices) {
                match notice {
                    Notice::Deliver(node, d) => app.on_deliver(self, node, d),
                    Notice::FrameDone(node, f, acked) => app.on_frame_done(self, node, &f, acked),
                    Notice::Timer(node, tag) => app.on_timer(self, node, tag),
                }
            }
        }
    }

    fn mac_event(&mut self, node: usize, event: MacEvent) -> Result<(), NetError> {
        let st = &mut self.stations[node];
        let actions = st.mac.transition(event, &mut st.backoff_rng)?;
        self.execute(node, actions)
    }

    fn dispatch(&mut self, ev: Ev) -> Result<(), NetError> {
        match ev {
            Ev::PrepDone(node) => self.mac_event(node, MacEvent::PrepDone),
            Ev::SenseEnd(node) => {
                let (start, _) = self.stations[node].sense.take().expect("sense round in progress");
                let threshold = self.threshold(node);
                let outcome = mac::basic_sense(
                    &self.channel,
                    node,
                    start,
                    self.params.basic_sense_symbols,
                    self.params.symbol_period,
                    threshold,
                )?;
                self.mac_event(node, MacEvent::SenseResult(outcome))
            }
            Ev::EmissionStart(node) => self.start_emission(node),
            Ev::EmissionEnd(node) => {
                let tx = self.stations[node].tx.take().expect("emission in progress");
                if let Some((_, h)) = tx.abort {
                    self.queue.cancel(h);
                }
                let now = self.now();
                self.channel.set_mode(node, LedMode::Rx, now)?;
                self.record(node, "tx_end", json!({"frame": kind_name(tx.kind)}));
                self.prune();
                match tx.kind {
                    TxKind::Data => self.mac_event(node, MacEvent::DataTxDone),
                    TxKind::Ack => self.mac_event(node, MacEvent::AckTxDone),
                }
            }
            Ev::Abort(node) => {
                let tx = self.stations[node].tx.take().expect("emission in progress");
                self.queue.cancel(tx.end);
                let now = self.now();
                self.channel.truncate_emission(tx.id, now);
                self.channel.set_mode(node, LedMode::Rx, now)?;
                self.record(node, "tx_abort", json!({"frame": kind_name(tx.kind)}));
                // Receivers of the cut frame stop listening now.
                for r in 0..self.stations.len() {
                    if let Some((id, h)) = self.stations[r].rx {
                        if id == tx.id {
                            self.queue.cancel(h);
                            let h = self.queue.schedule_at(now, Ev::RxEnd { node: r, emission: id });
                            self.stations[r].rx = Some((id, h));
                        }
                    }
                }
                self.rescan_collisions();
                self.mac_event(node, MacEvent::CollisionDetected)
            }
            Ev::AckTimeout(node) => {
                self.stations[node].ack_timer = None;
                self.record(node, "ack_timeout", json!({}));
                self.mac_event(node, MacEvent::AckTimeout)
            }
            Ev::RxProcDone(node) => self.mac_event(node, MacEvent::RxProcDone),
            Ev::RxEnd { node, emission } => self.finish_reception(node, emission),
            Ev::AppTimer { node, tag } => {
                self.notices.push(Notice::Timer(node, tag));
                Ok(())
            }
        }
    }

    fn threshold(&self, node: usize) -> f64 {
        self.stations[node]
            .threshold
            .unwrap_or_else(|| mac::fallback_threshold(self.channel.params().max_count()))
    }

    fn execute(&mut self, node: usize, actions: Vec<MacAction>) -> Result<(), NetError> {
        for action in actions {
            match action {
                MacAction::StartPrep(d) => {
                    self.queue.schedule(d, Ev::PrepDone(node));
                }
                MacAction::StartBasicSense => {
                    let now = self.now();
                    let led = self.channel.led_state(node)?;
                    debug_assert_eq!(led.mode, LedMode::Rx);
                    let start = now.max(led.effective_at);
                    let h = self
                        .queue
                        .schedule_at(start + self.params.basic_sense_window(), Ev::SenseEnd(node));
                    self.stations[node].sense = Some((start, h));
                }
                MacAction::StopSensing => {
                    if let Some((_, h)) = self.stations[node].sense.take() {
                        self.queue.cancel(h);
                    }
                }
                MacAction::TransmitData(f) => self.request_tx(node, TxKind::Data, f)?,
                MacAction::TransmitAck(f) => self.request_tx(node, TxKind::Ack, f)?,
                MacAction::ArmAckTimer(d) => {
                    let h = self.queue.schedule(d, Ev::AckTimeout(node));
                    self.stations[node].ack_timer = Some(h);
                }
                MacAction::CancelAckTimer => {
                    if let Some(h) = self.stations[node].ack_timer.take() {
                        self.queue.cancel(h);
                    }
                }
                MacAction::StartRxProcessing(d) => {
                    self.queue.schedule(d, Ev::RxProcDone(node));
                }
                MacAction::Deliver(d) => {
                    self.record(
                        node,
                        "deliver",
                        json!({"peer": d.peer, "protocol": d.protocol, "len": d.payload.len()}),
                    );
                    self.notices.push(Notice::Deliver(node, d));
                }
                MacAction::BackoffDrawn(counter) => {
                    let cw = self.stations[node].mac.cw();
                    self.record(node, "backoff", json!({"counter": counter, "cw": cw}));
                }
                MacAction::FrameAcked(f) => {
                    self.record(node, "acked", json!({"dst": f.dst, "len": f.payload.len()}));
                    self.notices.push(Notice::FrameDone(node, f, true));
                }
                MacAction::FrameDropped(f) => {
                    self.record(node, "dropped", json!({"dst": f.dst, "len": f.payload.len()}));
                    self.notices.push(Notice::FrameDone(node, f, false));
                }
            }
        }
        Ok(())
    }

    fn request_tx(&mut self, node: usize, kind: TxKind, frame: MacFrame) -> Result<(), NetError> {
        let symbols: Arc<[Symbol]> = frame::frame_to_symbols(&frame, self.params.max_payload)?
            .to_symbols()
            .into();
        let now = self.now();
        let effective = self.channel.set_mode(node, LedMode::Tx, now)?;
        self.stations[node].pending_tx = Some(PendingTx { kind, symbols, frame });
        self.queue.schedule_at(effective, Ev::EmissionStart(node));
        Ok(())
    }

    fn start_emission(&mut self, node: usize) -> Result<(), NetError> {
        let pending = self.stations[node].pending_tx.take().expect("transmission requested");
        let now = self.now();
        let id = self.channel.begin_emission(
            node,
            now,
            pending.symbols.clone(),
            pending.kind == TxKind::Data,
        )?;
        let airtime = self.params.symbol_period.times(pending.symbols.len() as u64);
        let end = self.queue.schedule(airtime, Ev::EmissionEnd(node));
        self.stations[node].tx = Some(ActiveTx {
            kind: pending.kind,
            id,
            end,
            abort: None,
        });
        let f = &pending.frame;
        self.record(
            node,
            "tx_start",
            json!({"frame": frame_kind(f), "dst": f.dst, "src": f.src, "len": f.payload.len(), "symbols": pending.symbols.len()}),
        );
        // Every idle listener that can see this LED locks onto the frame.
        for r in 0..self.stations.len() {
            if r == node || self.stations[r].rx.is_some() {
                continue;
            }
            if self.channel.params().gain[node][r] <= 0.0 {
                continue;
            }
            if self.channel.mode_at(r, now)? != ModeStatus::Rx {
                continue;
            }
            let h = self.queue.schedule_at(now + airtime, Ev::RxEnd { node: r, emission: id });
            self.stations[r].rx = Some((id, h));
        }
        self.rescan_collisions();
        Ok(())
    }

    /// Recomputes when each fast-sensing transmitter would detect a
    /// collision, given the emissions known so far.
    ///
    /// Samples depend only on (node, instant) and on emissions, and a new
    /// emission never changes the channel before it starts, so re-running the
    /// scan from the frame start agrees with everything already decided.
    fn rescan_collisions(&mut self) {
        let ts = self.params.symbol_period;
        let half = SimDuration::from_nanos(ts.as_nanos() / 2);
        let needed = self.params.collision_busy_symbols;
        for node in 0..self.stations.len() {
            let Some(tx) = &self.stations[node].tx else { continue };
            if tx.kind != TxKind::Data {
                continue;
            }
            let id = tx.id;
            let old = tx.abort;
            let threshold = self.threshold(node);
            let e = self.channel.emission(id).expect("active emission retained");
            let mut run = 0;
            let mut detect = None;
            for (k, sym) in e.symbols.iter().enumerate() {
                if *sym != Symbol::Low {
                    continue;
                }
                let slot = e.slot_start(k, ts);
                match mac::fast_sense(&self.channel, node, slot + half, threshold) {
                    Ok(SenseOutcome::Busy) => run += 1,
                    Ok(SenseOutcome::Clear) => run = 0,
                    Err(_) => unreachable!("mid-slot sample lies in the fast-sense window"),
                }
                if run >= needed {
                    // The LED is already committed to the next symbol when
                    // the sensing window closes, so the abort lands one slot
                    // later. A frame that ends first simply completes.
                    let at = slot + ts.times(2);
                    if at < e.end {
                        detect = Some(at);
                    }
                    break;
                }
            }
            if old.map(|(t, _)| t) == detect {
                continue;
            }
            if let Some((_, h)) = old {
                self.queue.cancel(h);
            }
            let abort = detect.map(|t| (t, self.queue.schedule_at(t, Ev::Abort(node))));
            self.stations[node].tx.as_mut().expect("still transmitting").abort = abort;
        }
    }

    fn finish_reception(&mut self, node: usize, emission: EmissionId) -> Result<(), NetError> {
        self.stations[node].rx = None;
        let ts = self.params.symbol_period;
        let half = SimDuration::from_nanos(ts.as_nanos() / 2);
        let e = self.channel.emission(emission).expect("received emission retained");
        let (start, end, total) = (e.start, e.end, e.symbols.len());
        let mut samples: Vec<AdcSample> = Vec::with_capacity(total);
        let mut missed = false;
        for k in 0..total {
            let t = start + ts.times(k as u64) + half;
            if t >= end {
                break;
            }
            match self.channel.sample(node, t) {
                Ok(s) => samples.push(s),
                Err(ChannelError::NotInRxMode { .. }) => {
                    missed = true;
                    break;
                }
                Err(other) => return Err(other.into()),
            }
        }
        let truncated = samples.len() < total;
        let event = if missed {
            self.record(node, "rx_fail", json!({"reason": "missed"}));
            MacEvent::ReceptionFailed {
                reason: RxFailure::Missed,
                coded_bytes: None,
            }
        } else {
            match phy::locate_frame(&samples) {
                Err(_) => {
                    self.record(node, "rx_fail", json!({"reason": "no_sync"}));
                    MacEvent::ReceptionFailed {
                        reason: RxFailure::NoSync,
                        coded_bytes: None,
                    }
                }
                Ok(sync) => {
                    self.stations[node].threshold = Some(sync.threshold);
                    let body = phy::slice_all(&samples[sync.payload_symbol_start..], sync.threshold);
                    let coded = (!truncated).then_some(body.len() / 16);
                    match frame::symbols_to_frame(&body) {
                        Ok(decoded) => {
                            let f = &decoded.frame;
                            self.record(
                                node,
                                "rx_ok",
                                json!({"frame": frame_kind(f), "src": f.src, "dst": f.dst, "len": f.payload.len(), "corrected": decoded.corrected}),
                            );
                            MacEvent::FrameReceived {
                                coded_bytes: decoded.coded_bytes,
                                frame: decoded.frame,
                            }
                        }
                        Err(err) => {
                            let reason = match err {
                                FrameError::BadCrc => RxFailure::Crc,
                                _ => RxFailure::Rs,
                            };
                            let name = if reason == RxFailure::Crc { "crc" } else { "rs" };
                            self.record(node, "rx_fail", json!({"reason": name}));
                            MacEvent::ReceptionFailed {
                                reason,
                                coded_bytes: coded,
                            }
                        }
                    }
                }
            }
        };
        self.mac_event(node, event)
    }

    /// Drops channel history nobody can query any more.
    fn prune(&mut self) {
        let now = self.now();
        let lookback = self.params.basic_sense_window() + self.params.symbol_period.times(2);
        let mut horizon = SimTime(now.as_nanos().saturating_sub(lookback.as_nanos()));
        for st in &self.stations {
            for id in st.tx.as_ref().map(|t| t.id).into_iter().chain(st.rx.map(|r| r.0)) {
                if let Some(e) = self.channel.emission(id) {
                    horizon = horizon.min(e.start);
                }
            }
        }
        self.channel.prune_before(horizon);
    }
}

fn kind_name(kind: TxKind) -> &'static str {
    match kind {
        TxKind::Data => "DATA",
        TxKind::Ack => "ACK",
    }
}
