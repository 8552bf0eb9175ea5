//! Shared half-duplex optical medium.
//!
//! Every node owns one LED that is either emitting (TX) or acting as a
//! photodetector (RX). Mode changes take effect `switch_latency` after they
//! are requested; during the transition the LED can neither emit nor sample.
//! Light from concurrent emitters adds up at each receiver, is offset by
//! ambient light, perturbed by Gaussian noise and quantised by the ADC.
//!
//! Emissions are stored as whole symbol sequences with a start time, so a
//! receiver can evaluate the channel at any instant inside the retained
//! history instead of being stepped symbol by symbol.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{AdcSample, Symbol};
use crate::sim::{RngStreams, SimDuration, SimTime, StreamPurpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {node} is not in RX mode at {at}")]
    NotInRxMode { node: usize, at: SimTime },
    #[error("node {node} is not in TX mode at {at}")]
    NotInTxMode { node: usize, at: SimTime },
    #[error("node {node} already has an emission in progress at {at}")]
    EmitterBusy { node: usize, at: SimTime },
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
}

/// Line-of-sight inverse-square gain helper.
pub fn link_gain(distance_m: f64, g0: f64) -> Result<f64, ChannelError> {
    if distance_m.is_nan() || distance_m <= 0.0 {
        return Err(ChannelError::NonPositiveDistance(distance_m));
    }
    Ok(g0 / (distance_m * distance_m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// `gain[emitter][receiver]`, linear and dimensionless. The diagonal is
    /// ignored.
    pub gain: Vec<Vec<f64>>,
    /// Ambient light per receiving node, in normalised intensity.
    pub ambient: Vec<f64>,
    /// Noise standard deviation per receiving node.
    pub noise_sigma: Vec<f64>,
    pub adc_bits: u32,
    /// Normalised intensity that maps to the top ADC code.
    pub full_scale: f64,
    pub switch_latency: SimDuration,
    pub intensity_high: f64,
    pub intensity_low: f64,
}

impl ChannelParams {
    pub const DEFAULT_AMBIENT: f64 = 0.1;
    pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
    pub const DEFAULT_ADC_BITS: u32 = 10;
    pub const DEFAULT_SWITCH_LATENCY: SimDuration = SimDuration::from_micros(2);

    /// Defaults for `n` nodes with the given gain matrix.
    pub fn with_gains(gain: Vec<Vec<f64>>) -> Self {
        let n = gain.len();
        ChannelParams {
            gain,
            ambient: vec![Self::DEFAULT_AMBIENT; n],
            noise_sigma: vec![Self::DEFAULT_NOISE_SIGMA; n],
            adc_bits: Self::DEFAULT_ADC_BITS,
            full_scale: 1.0,
            switch_latency: Self::DEFAULT_SWITCH_LATENCY,
            intensity_high: 1.0,
            intensity_low: 0.0,
        }
    }

    /// Every pair of distinct nodes sees the other with `gain`.
    pub fn uniform(n: usize, gain: f64) -> Self {
        let matrix = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { gain }).collect())
            .collect();
        Self::with_gains(matrix)
    }

    pub fn node_count(&self) -> usize {
        self.gain.len()
    }

    pub fn max_count(&self) -> u16 {
        ((1u32 << self.adc_bits) - 1) as u16
    }

    pub fn validate(&self, symbol_period: SimDuration) -> Result<(), ChannelError> {
        let n = self.gain.len();
        let bad = |msg: String| Err(ChannelError::InvalidParams(msg));
        if self.gain.iter().any(|row| row.len() != n) {
            return bad(format!("gain matrix must be {n}x{n}"));
        }
        if self.gain.iter().flatten().any(|g| !g.is_finite() || *g < 0.0) {
            return bad("gain entries must be finite and non-negative".into());
        }
        if self.ambient.len() != n || self.noise_sigma.len() != n {
            return bad("ambient and noise_sigma need one entry per node".into());
        }
        if self.ambient.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("ambient must be non-negative".into());
        }
        if self.noise_sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if !(1..=16).contains(&self.adc_bits) {
            return bad(format!("adc_bits must be in 1..=16, got {}", self.adc_bits));
        }
        if !(self.full_scale > 0.0) {
            return bad("full_scale must be positive".into());
        }
        // TX -> RX -> TX has to fit inside one LOW symbol for fast sensing.
        if self.switch_latency.times(2) >= symbol_period {
            return bad(format!(
                "two switch latencies ({} us) must fit in one symbol period ({} us)",
                self.switch_latency.times(2).as_micros_f64(),
                symbol_period.as_micros_f64()
            ));
        }
        Ok(())
    }

    /// Converts a normalised intensity to ADC counts.
    pub fn quantize(&self, intensity: f64) -> AdcSample {
        let clamped = intensity.clamp(0.0, self.full_scale);
        let counts = (clamped / self.full_scale * self.max_count() as f64).round();
        AdcSample(counts as u16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LedMode {
    Tx,
    Rx,
}

/// Requested mode of an LED and when it takes effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedState {
    pub mode: LedMode,
    pub requested_at: SimTime,
    pub effective_at: SimTime,
}

/// What an LED is doing at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeStatus {
    Tx,
    Rx,
    Switching { to: LedMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmissionId(pub u64);

#[derive(Debug, Clone)]
pub struct Emission {
    pub id: EmissionId,
    pub node: usize,
    pub start: SimTime,
    pub end: SimTime,
    pub symbols: Arc<[Symbol]>,
    /// The emitter drops to RX inside its own LOW symbols to sense.
    pub fast_sense: bool,
}

impl Emission {
    pub fn symbol_at(&self, t: SimTime, symbol_period: SimDuration) -> Option<Symbol> {
        if t < self.start || t >= self.end {
            return None;
        }
        let index = ((t - self.start).as_nanos() / symbol_period.as_nanos()) as usize;
        self.symbols.get(index).copied()
    }

    pub fn slot_start(&self, index: usize, symbol_period: SimDuration) -> SimTime {
        self.start + symbol_period.times(index as u64)
    }

    /// Number of symbols actually put on the air.
    pub fn emitted_len(&self, symbol_period: SimDuration) -> usize {
        let span = (self.end - self.start).as_nanos();
        (span.div_ceil(symbol_period.as_nanos()) as usize).min(self.symbols.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SampleRecord {
    pub time_ns: u64,
    pub node: usize,
    pub counts: u16,
}

/// Anything that can hand out ADC readings for a node at an instant.
pub trait Medium {
    fn sample(&self, node: usize, t: SimTime) -> Result<AdcSample, ChannelError>;
    fn full_scale_counts(&self) -> u16;
}

/// Gaussian noise addressed by `(node, instant)`, so the same reading is
/// reproduced no matter how often or in what order it is evaluated.
#[derive(Debug, Clone)]
struct NoiseField {
    streams: RngStreams,
}

impl NoiseField {
    fn standard_normal(&self, node: usize, t: SimTime) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.streams.root_seed());
        rng.set_stream(RngStreams::stream_id(node, StreamPurpose::Noise));
        rng.set_word_pos(t.as_nanos() as u128 * 16);
        rng.sample(StandardNormal)
    }
}

pub struct OpticalChannel {
    params: ChannelParams,
    symbol_period: SimDuration,
    modes: Vec<Vec<LedState>>,
    emissions: Vec<Emission>,
    next_emission: u64,
    noise: NoiseField,
    sample_log: Option<RefCell<Vec<SampleRecord>>>,
}

impl OpticalChannel {
    pub fn new(params: ChannelParams, symbol_period: SimDuration, root_seed: u64) -> Result<Self, ChannelError> {
        params.validate(symbol_period)?;
        let n = params.node_count();
        let initial = LedState {
            mode: LedMode::Rx,
            requested_at: SimTime::ZERO,
            effective_at: SimTime::ZERO,
        };
        Ok(OpticalChannel {
            params,
            symbol_period,
            modes: vec![vec![initial]; n],
            emissions: Vec::new(),
            next_emission: 0,
            noise: NoiseField {
                streams: RngStreams::new(root_seed),
            },
            sample_log: None,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn symbol_period(&self) -> SimDuration {
        self.symbol_period
    }

    pub fn switch_latency(&self) -> SimDuration {
        self.params.switch_latency
    }

    pub fn node_count(&self) -> usize {
        self.modes.len()
    }

    pub fn enable_sample_log(&mut self) {
        self.sample_log = Some(RefCell::new(Vec::new()));
    }

    pub fn take_sample_log(&mut self) -> Vec<SampleRecord> {
        self.sample_log
            .as_ref()
            .map(|log| std::mem::take(&mut *log.borrow_mut()))
            .unwrap_or_default()
    }

    fn check_node(&self, node: usize) -> Result<(), ChannelError> {
        if node < self.modes.len() {
            Ok(())
        } else {
            Err(ChannelError::UnknownNode(node))
        }
    }

    /// Requests a mode change and returns when it takes effect. Requesting
    /// the mode the LED is already in (or heading to) changes nothing.
    pub fn set_mode(&mut self, node: usize, mode: LedMode, now: SimTime) -> Result<SimTime, ChannelError> {
        self.check_node(node)?;
        let timeline = &mut self.modes[node];
        let last = *timeline.last().expect("timeline never empty");
        if last.mode == mode {
            return Ok(last.effective_at.max(now));
        }
        let state = LedState {
            mode,
            requested_at: now,
            effective_at: now + self.params.switch_latency,
        };
        timeline.push(state);
        Ok(state.effective_at)
    }

    pub fn led_state(&self, node: usize) -> Result<LedState, ChannelError> {
        self.check_node(node)?;
        Ok(*self.modes[node].last().expect("timeline never empty"))
    }

    /// Mode of the LED at `t`, ignoring fast-sense windows.
    pub fn mode_at(&self, node: usize, t: SimTime) -> Result<ModeStatus, ChannelError> {
        self.check_node(node)?;
        let timeline = &self.modes[node];
        let idx = timeline.partition_point(|s| s.requested_at <= t);
        let state = if idx == 0 { timeline[0] } else { timeline[idx - 1] };
        Ok(if t < state.effective_at {
            ModeStatus::Switching { to: state.mode }
        } else {
            match state.mode {
                LedMode::Tx => ModeStatus::Tx,
                LedMode::Rx => ModeStatus::Rx,
            }
        })
    }

    fn own_emission_at(&self, node: usize, t: SimTime) -> Option<&Emission> {
        self.emissions
            .iter()
            .find(|e| e.node == node && e.start <= t && t < e.end)
    }

    /// True when `node` can take an ADC reading at `t`: either its LED is in
    /// RX mode, or it is inside the receive window of one of its own LOW
    /// symbols while fast sensing.
    pub fn can_sample(&self, node: usize, t: SimTime) -> Result<bool, ChannelError> {
        match self.mode_at(node, t)? {
            ModeStatus::Rx => Ok(true),
            ModeStatus::Switching { .. } => Ok(false),
            ModeStatus::Tx => {
                let Some(e) = self.own_emission_at(node, t) else {
                    return Ok(false);
                };
                if !e.fast_sense || e.symbol_at(t, self.symbol_period) != Some(Symbol::Low) {
                    return Ok(false);
                }
                let index = ((t - e.start).as_nanos() / self.symbol_period.as_nanos()) as usize;
                let slot = e.slot_start(index, self.symbol_period);
                let open = slot + self.params.switch_latency;
                let close = slot + self.symbol_period;
                Ok(t >= open && t + self.params.switch_latency < close)
            }
        }
    }

    /// Starts an emission of `symbols` at `start`, one symbol per period.
    pub fn begin_emission(
        &mut self,
        node: usize,
        start: SimTime,
        symbols: Arc<[Symbol]>,
        fast_sense: bool,
    ) -> Result<EmissionId, ChannelError> {
        if self.mode_at(node, start)? != ModeStatus::Tx {
            return Err(ChannelError::NotInTxMode { node, at: start });
        }
        if self.emissions.iter().any(|e| e.node == node && e.end > start) {
            return Err(ChannelError::EmitterBusy { node, at: start });
        }
        let id = EmissionId(self.next_emission);
        self.next_emission += 1;
        let end = start + self.symbol_period.times(symbols.len() as u64);
        self.emissions.push(Emission {
            id,
            node,
            start,
            end,
            symbols,
            fast_sense,
        });
        Ok(id)
    }

    /// Holds a single symbol for one period.
    pub fn emit(&mut self, node: usize, symbol: Symbol, start: SimTime) -> Result<EmissionId, ChannelError> {
        self.begin_emission(node, start, Arc::from(vec![symbol]), false)
    }

    /// Cuts an emission short. The LED is dark from `at` on.
    pub fn truncate_emission(&mut self, id: EmissionId, at: SimTime) -> Option<&Emission> {
        let e = self.emissions.iter_mut().find(|e| e.id == id)?;
        if at < e.end {
            e.end = at.max(e.start);
        }
        Some(e)
    }

    pub fn emission(&self, id: EmissionId) -> Option<&Emission> {
        self.emissions.iter().find(|e| e.id == id)
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emissions
    }

    /// Forgets emissions that ended before `t` and mode history that can no
    /// longer be queried.
    pub fn prune_before(&mut self, t: SimTime) {
        self.emissions.retain(|e| e.end >= t);
        for timeline in &mut self.modes {
            let keep_from = timeline.partition_point(|s| s.requested_at <= t).saturating_sub(1);
            if keep_from > 0 {
                timeline.drain(..keep_from);
            }
        }
    }

    /// Noise-free optical power reaching `node` at `t`, ambient excluded.
    pub fn incident_intensity(&self, node: usize, t: SimTime) -> f64 {
        let mut contributions: Vec<(usize, f64)> = self
            .emissions
            .iter()
            .filter(|e| e.node != node)
            .filter_map(|e| {
                let symbol = e.symbol_at(t, self.symbol_period)?;
                let level = match symbol {
                    Symbol::High => self.params.intensity_high,
                    Symbol::Low => self.params.intensity_low,
                };
                Some((e.node, self.params.gain[e.node][node] * level))
            })
            .collect();
        // Fixed summation order keeps samples independent of registration order.
        contributions.sort_by_key(|&(emitter, _)| emitter);
        contributions.iter().map(|&(_, v)| v).sum()
    }

    pub fn sample(&self, node: usize, t: SimTime) -> Result<AdcSample, ChannelError> {
        if !self.can_sample(node, t)? {
            return Err(ChannelError::NotInRxMode { node, at: t });
        }
        let mut level = self.incident_intensity(node, t) + self.params.ambient[node];
        let sigma = self.params.noise_sigma[node];
        if sigma > 0.0 {
            level += sigma * self.noise.standard_normal(node, t);
        }
        let sample = self.params.quantize(level);
        if let Some(log) = &self.sample_log {
            log.borrow_mut().push(SampleRecord {
                time_ns: t.as_nanos(),
                node,
                counts: sample.0,
            });
        }
        Ok(sample)
    }
}

impl Medium for OpticalChannel {
    fn sample(&self, node: usize, t: SimTime) -> Result<AdcSample, ChannelError> {
        OpticalChannel::sample(self, node, t)
    }

    fn full_scale_counts(&self) -> u16 {
        self.params.max_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Symbol::{High, Low};

    const TS: SimDuration = SimDuration::from_micros(20);

    fn noiseless(gain: Vec<Vec<f64>>, ambient: f64) -> OpticalChannel {
        let n = gain.len();
        let mut params = ChannelParams::with_gains(gain);
        params.ambient = vec![ambient; n];
        params.noise_sigma = vec![0.0; n];
        OpticalChannel::new(params, TS, 1).unwrap()
    }

    fn us(v: u64) -> SimTime {
        SimTime(v * 1_000)
    }

    #[test]
    fn mode_switch_takes_latency() {
        let mut ch = noiseless(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.1);
        assert_eq!(ch.set_mode(0, LedMode::Tx, us(100)).unwrap(), us(102));
        assert_eq!(
            ch.mode_at(0, us(101)).unwrap(),
            ModeStatus::Switching { to: LedMode::Tx }
        );
        assert!(matches!(ch.sample(0, us(101)), Err(ChannelError::NotInRxMode { .. })));
        assert_eq!(ch.mode_at(0, us(102)).unwrap(), ModeStatus::Tx);
        assert!(matches!(ch.set_mode(5, LedMode::Tx, us(0)), Err(ChannelError::UnknownNode(5))));
    }

    #[test]
    fn back_to_back_switches_fit_in_one_symbol() {
        let mut ch = noiseless(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.1);
        let rx = ch.set_mode(0, LedMode::Rx, us(0)).unwrap();
        let tx_at = ch.set_mode(0, LedMode::Tx, us(10)).unwrap();
        let rx_at = ch.set_mode(0, LedMode::Rx, tx_at).unwrap();
        let tx_again = ch.set_mode(0, LedMode::Tx, rx_at).unwrap();
        assert_eq!(rx, us(0));
        assert!(tx_again - us(10) < TS);
    }

    #[test]
    fn emission_levels_and_guards() {
        let mut ch = noiseless(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.1);
        assert!(matches!(
            ch.emit(0, High, us(0)),
            Err(ChannelError::NotInTxMode { .. })
        ));
        let t = ch.set_mode(0, LedMode::Tx, us(0)).unwrap();
        ch.emit(0, High, t).unwrap();
        assert_eq!(ch.incident_intensity(1, t + SimDuration::from_micros(10)), 1.0);
        // 1.0 + 0.1 clamps to full scale.
        assert_eq!(ch.sample(1, t + SimDuration::from_micros(10)).unwrap(), AdcSample(1023));
        // A HIGH emitter can never sample.
        assert!(ch.sample(0, t + SimDuration::from_micros(10)).is_err());

        let next = t + TS;
        ch.emit(0, Low, next).unwrap();
        assert_eq!(ch.incident_intensity(1, next + SimDuration::from_micros(5)), 0.0);
        assert_eq!(ch.sample(1, next + SimDuration::from_micros(5)).unwrap(), AdcSample(102));
    }

    #[test]
    fn superposition_of_two_emitters() {
        let gains = vec![
            vec![0.0, 0.0, 0.4],
            vec![0.0, 0.0, 0.4],
            vec![0.4, 0.4, 0.0],
        ];
        let mut ch = noiseless(gains, 0.0);
        for node in [0, 1] {
            let t = ch.set_mode(node, LedMode::Tx, us(0)).unwrap();
            ch.emit(node, High, t).unwrap();
        }
        assert_eq!(ch.sample(2, us(10)).unwrap(), AdcSample(818));
    }

    #[test]
    fn fast_sense_window_inside_low_symbols() {
        let mut ch = noiseless(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.1);
        let t = ch.set_mode(0, LedMode::Tx, us(0)).unwrap();
        ch.begin_emission(0, t, Arc::from(vec![High, Low]), true).unwrap();
        assert!(!ch.can_sample(0, t + SimDuration::from_micros(10)).unwrap());
        let low_slot = t + TS;
        assert!(!ch.can_sample(0, low_slot + SimDuration::from_micros(1)).unwrap());
        assert!(ch.can_sample(0, low_slot + SimDuration::from_micros(10)).unwrap());
        assert!(!ch.can_sample(0, low_slot + SimDuration::from_micros(19)).unwrap());
    }

    #[test]
    fn truncation_darkens_the_tail() {
        let mut ch = noiseless(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.0);
        let t = ch.set_mode(0, LedMode::Tx, us(0)).unwrap();
        let id = ch.begin_emission(0, t, Arc::from(vec![High; 10]), false).unwrap();
        ch.truncate_emission(id, t + TS.times(3));
        assert_eq!(ch.incident_intensity(1, t + TS.times(2)), 1.0);
        assert_eq!(ch.incident_intensity(1, t + TS.times(4)), 0.0);
        assert_eq!(ch.emission(id).unwrap().emitted_len(TS), 3);
    }

    #[test]
    fn link_gain_inverse_square() {
        assert!((link_gain(0.6, 0.36).unwrap() - 1.0).abs() < 1e-12);
        assert!((link_gain(1.0, 0.36).unwrap() - 0.36).abs() < 1e-12);
        let near = link_gain(0.5, 0.36).unwrap();
        let far = link_gain(1.0, 0.36).unwrap();
        assert!((near / far - 4.0).abs() < 1e-12);
        assert!(link_gain(0.0, 1.0).is_err());
        assert!(link_gain(-1.0, 1.0).is_err());
    }

    #[test]
    fn noisy_samples_are_reproducible_per_instant() {
        let mut params = ChannelParams::uniform(2, 0.5);
        params.noise_sigma = vec![0.05; 2];
        let a = OpticalChannel::new(params.clone(), TS, 9).unwrap();
        let b = OpticalChannel::new(params, TS, 9).unwrap();
        let readings: Vec<_> = (0..50).map(|k| a.sample(1, us(k * 20 + 10)).unwrap()).collect();
        let again: Vec<_> = (0..50).rev().map(|k| b.sample(1, us(k * 20 + 10)).unwrap()).collect();
        let mut again = again;
        again.reverse();
        assert_eq!(readings, again);
        assert!(readings.iter().any(|s| *s != readings[0]));
    }

    #[test]
    fn rejects_slow_switching() {
        let mut params = ChannelParams::uniform(2, 1.0);
        params.switch_latency = SimDuration::from_micros(10);
        assert!(OpticalChannel::new(params, TS, 0).is_err());
    }

    #[test]
    fn clamps_at_full_scale() {
        let gains = vec![vec![0.0, 0.0, 0.9], vec![0.0, 0.0, 0.9], vec![0.0; 3]];
        let mut ch = noiseless(gains, 0.5);
        for node in [0, 1] {
            let t = ch.set_mode(node, LedMode::Tx, us(0)).unwrap();
            ch.emit(node, High, t).unwrap();
        }
        assert_eq!(ch.sample(2, us(10)).unwrap(), AdcSample(1023));
    }
}
