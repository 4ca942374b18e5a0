//! Deterministic discrete-event scheduler.
//!
//! Time is an integer count of microseconds since the start of the run.
//! Events with equal timestamps are dispatched in the order they were
//! scheduled. Every run owns a single seeded random stream; models draw
//! from it in dispatch order, so a `(scenario, seed)` pair always replays
//! the same trace.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Simulated time in microseconds.
pub type Micros = u64;

/// Closed set of event tags understood by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    FrameDelivery,
    InputChange,
    ScanTick,
    RelaySettle,
    UserCommand,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::FrameDelivery => "frame-delivery",
            EventKind::InputChange => "input-change",
            EventKind::ScanTick => "scan-tick",
            EventKind::RelaySettle => "relay-settle",
            EventKind::UserCommand => "user-command",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub timestamp: Micros,
    pub kind: EventKind,
    pub payload: P,
}

impl<P> SimEvent<P> {
    pub fn new(timestamp: Micros, kind: EventKind, payload: P) -> Self {
        SimEvent {
            timestamp,
            kind,
            payload,
        }
    }
}

/// Identifies a scheduled event so it can be cancelled before dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    timestamp: Micros,
    seq: u64,
}

impl EventHandle {
    pub fn timestamp(&self) -> Micros {
        self.timestamp
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("event at t={at}us is in the past (now={now}us)")]
    InPast { at: Micros, now: Micros },
    #[error("run_until({t_end}us) is behind the clock (now={now}us)")]
    EndInPast { t_end: Micros, now: Micros },
}

/// One dispatched event as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub t: Micros,
    pub kind: EventKind,
    pub event: String,
    pub state: String,
}

/// Ordered record of dispatched events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TraceEntry) {
        debug_assert!(self.entries.last().is_none_or(|last| last.t <= entry.t));
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: Trace) {
        for entry in other.entries {
            self.push(entry);
        }
    }

    pub fn count_kind(&self, kind: EventKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

/// Something the kernel can drive.
pub trait Model {
    type Payload;

    /// Handles one event and returns a one-line description for the trace.
    fn dispatch(
        &mut self,
        event: SimEvent<Self::Payload>,
        kernel: &mut Kernel<Self::Payload>,
    ) -> String;

    /// Compact observable state, recorded after every dispatch.
    fn observe(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelCounters {
    pub scheduled: u64,
    pub dispatched: u64,
    pub cancelled: u64,
}

pub struct Kernel<P> {
    now: Micros,
    next_seq: u64,
    queue: BTreeMap<EventHandle, SimEvent<P>>,
    counters: KernelCounters,
    rng: ChaCha8Rng,
}

impl<P> Kernel<P> {
    pub fn new(seed: u64) -> Self {
        Kernel {
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            counters: KernelCounters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn counters(&self) -> KernelCounters {
        self.counters
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Timestamp of the next event that would be dispatched.
    pub fn next_timestamp(&self) -> Option<Micros> {
        self.queue.first_key_value().map(|(h, _)| h.timestamp)
    }

    pub fn schedule(&mut self, event: SimEvent<P>) -> Result<EventHandle, KernelError> {
        if event.timestamp < self.now {
            return Err(KernelError::InPast {
                at: event.timestamp,
                now: self.now,
            });
        }
        let handle = EventHandle {
            timestamp: event.timestamp,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.counters.scheduled += 1;
        self.queue.insert(handle, event);
        Ok(handle)
    }

    /// Schedules `delay` microseconds from now.
    pub fn schedule_in(
        &mut self,
        delay: Micros,
        kind: EventKind,
        payload: P,
    ) -> Result<EventHandle, KernelError> {
        self.schedule(SimEvent::new(self.now + delay, kind, payload))
    }

    /// Removes a pending event. Returns it if it had not been dispatched yet.
    pub fn cancel(&mut self, handle: EventHandle) -> Option<SimEvent<P>> {
        let removed = self.queue.remove(&handle);
        if removed.is_some() {
            self.counters.cancelled += 1;
        }
        removed
    }

    fn pop_due(&mut self, t_end: Micros) -> Option<SimEvent<P>> {
        let (&handle, _) = self.queue.first_key_value()?;
        if handle.timestamp > t_end {
            return None;
        }
        let event = self.queue.remove(&handle)?;
        self.now = event.timestamp;
        self.counters.dispatched += 1;
        Some(event)
    }

    /// Dispatches every event with `timestamp <= t_end`, then sets the
    /// clock to `t_end`.
    pub fn run_until<M>(&mut self, t_end: Micros, model: &mut M) -> Result<Trace, KernelError>
    where
        M: Model<Payload = P>,
    {
        if t_end < self.now {
            return Err(KernelError::EndInPast {
                t_end,
                now: self.now,
            });
        }
        let mut trace = Trace::new();
        while let Some(event) = self.pop_due(t_end) {
            let t = event.timestamp;
            let kind = event.kind;
            let description = model.dispatch(event, self);
            trace.push(TraceEntry {
                t,
                kind,
                event: description,
                state: model.observe(),
            });
        }
        self.now = t_end;
        Ok(trace)
    }
}

impl<P> fmt::Debug for Kernel<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("now", &self.now)
            .field("pending", &self.queue.len())
            .field("counters", &self.counters)
            .finish()
    }
}
