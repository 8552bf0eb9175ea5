//! Discrete-event kernel: virtual clock, totally ordered event queue and
//! seeded per-node random substreams.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Simulated instant, in nanoseconds since the start of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

/// Non-negative simulated span, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimDuration(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * 1e9).round() as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimDuration(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimDuration(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimDuration(ms * 1_000_000)
    }

    pub fn from_micros_f64(us: f64) -> Self {
        SimDuration((us * 1e3).round().max(0.0) as u64)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimDuration((secs * 1e9).round().max(0.0) as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn times(self, n: u64) -> SimDuration {
        SimDuration(self.0 * n)
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        debug_assert!(self >= rhs, "negative span {self:?} - {rhs:?}");
        SimDuration(self.0 - rhs.0)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}us", self.0 / 1_000, self.0 % 1_000)
    }
}

/// Cancellation token returned by [`EventQueue::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: E,
}

#[derive(Debug)]
struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    kind: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Event queue ordered by `(fire_at, seq)`. Events scheduled for the same
/// instant fire in the order they were scheduled.
#[derive(Debug)]
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<E>>>,
    live: HashSet<u64>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Enqueues `kind` to fire at `now + delay`.
    pub fn schedule(&mut self, delay: SimDuration, kind: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule_at(at, kind)
    }

    /// Enqueues `kind` at an absolute instant. Instants in the past are
    /// clamped to the current clock.
    pub fn schedule_at(&mut self, at: SimTime, kind: E) -> EventHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.heap.push(Reverse(Entry {
            fire_at: at.max(self.now),
            seq,
            kind,
        }));
        EventHandle(seq)
    }

    /// Prevents a pending event from being dispatched. Cancelling an event
    /// that already fired is a no-op.
    pub fn cancel(&mut self, handle: EventHandle) {
        self.live.remove(&handle.0);
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pops the next live event due at or before `t_end` and advances the
    /// clock to its fire time.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<SimEvent<E>> {
        loop {
            match self.heap.peek() {
                Some(Reverse(e)) if e.fire_at <= t_end => {}
                _ => return None,
            }
            let Reverse(entry) = self.heap.pop()?;
            if !self.live.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.now);
            self.now = entry.fire_at;
            return Some(SimEvent {
                fire_at: entry.fire_at,
                seq: entry.seq,
                kind: entry.kind,
            });
        }
    }

    /// Moves the clock forward to `t` without dispatching anything. Never
    /// moves it backward.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatches every event with `fire_at <= t_end` through `handler`, then
    /// leaves the clock at `t_end`. Returns the number of dispatched events.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<E>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_due(t_end) {
            handler(self, ev);
            count += 1;
        }
        self.advance_to(t_end);
        count
    }
}

/// Purpose tag that separates random substreams of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamPurpose {
    Backoff = 1,
    Noise = 2,
    Traffic = 3,
}

/// Root of all randomness in a run. Each `(node, purpose)` pair gets its own
/// ChaCha stream, so draws made for one purpose never shift another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    root_seed: u64,
}

impl RngStreams {
    pub fn new(root_seed: u64) -> Self {
        RngStreams { root_seed }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn stream_id(node: usize, purpose: StreamPurpose) -> u64 {
        ((node as u64) << 8) | purpose as u64
    }

    pub fn substream(&self, node: usize, purpose: StreamPurpose) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root_seed);
        rng.set_stream(Self::stream_id(node, purpose));
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_instant_fires_in_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(SimDuration::from_micros(5), "a");
        q.schedule(SimDuration::from_micros(5), "b");
        q.schedule(SimDuration::from_micros(1), "c");
        let mut seen = Vec::new();
        q.run_until(SimTime(10_000), |_, ev| seen.push(ev.kind));
        assert_eq!(seen, vec!["c", "a", "b"]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut q = EventQueue::new();
        let h = q.schedule(SimDuration::from_micros(1), 1);
        q.schedule(SimDuration::from_micros(2), 2);
        q.cancel(h);
        let mut seen = Vec::new();
        let n = q.run_until(SimTime(1_000_000), |_, ev| seen.push(ev.kind));
        assert_eq!(seen, vec![2]);
        assert_eq!(n, 1);
    }

    #[test]
    fn zero_delay_precedes_later_events() {
        let mut q = EventQueue::new();
        q.schedule(SimDuration::from_micros(3), "late");
        q.schedule(SimDuration::ZERO, "now");
        let first = q.pop_due(SimTime(u64::MAX)).unwrap();
        assert_eq!(first.kind, "now");
        assert_eq!(first.fire_at, SimTime::ZERO);
    }

    #[test]
    fn empty_run_moves_clock_to_end() {
        let mut q: EventQueue<()> = EventQueue::new();
        let n = q.run_until(SimTime(42), |_, _| {});
        assert_eq!(n, 0);
        assert_eq!(q.now(), SimTime(42));
    }

    #[test]
    fn split_run_matches_single_run() {
        fn trace(splits: &[u64]) -> Vec<(u64, u32)> {
            let mut q = EventQueue::new();
            q.schedule(SimDuration(0), 0u32);
            let mut out = Vec::new();
            for &t in splits {
                q.run_until(SimTime(t), |q, ev| {
                    out.push((ev.fire_at.0, ev.kind));
                    if ev.kind < 20 {
                        q.schedule(SimDuration(7 + ev.kind as u64 % 3), ev.kind + 1);
                    }
                });
            }
            out
        }
        assert_eq!(trace(&[40, 500]), trace(&[500]));
    }

    #[test]
    fn handlers_may_schedule_into_the_same_instant() {
        let mut q = EventQueue::new();
        q.schedule(SimDuration(10), 0);
        let mut seen = Vec::new();
        q.run_until(SimTime(10), |q, ev| {
            seen.push(ev.kind);
            if ev.kind == 0 {
                q.schedule(SimDuration::ZERO, 1);
            }
        });
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn substreams_are_reproducible_and_isolated() {
        let streams = RngStreams::new(7);
        let draw = |purpose| {
            let mut rng = streams.substream(1, purpose);
            (0..4).map(|_| rng.random()).collect::<Vec<u32>>()
        };
        let a = draw(StreamPurpose::Backoff);
        let b = draw(StreamPurpose::Backoff);
        assert_eq!(a, b);

        // Draining another node's noise stream leaves this backoff stream untouched.
        let mut noise = streams.substream(2, StreamPurpose::Noise);
        for _ in 0..1000 {
            let _: u64 = noise.random();
        }
        let mut again = streams.substream(1, StreamPurpose::Backoff);
        let c: Vec<u32> = (0..4).map(|_| again.random()).collect();
        assert_eq!(a, c);

        let d = draw(StreamPurpose::Traffic);
        assert_ne!(a, d);
    }
}
