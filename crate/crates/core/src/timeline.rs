//! Timed events on a virtual clock.
//!
//! Events on [`Lane::Cluster`] with an [`EventClass::Inference`] or
//! [`EventClass::Overhead`] kind partition the busy time of the serving
//! group and never overlap each other; everything else is detail (per-worker
//! work, host-link transfers, markers) for inspecting a timeline.

use std::fmt;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Lane {
    Cluster,
    Worker(usize),
    Host,
    Disk,
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lane::Cluster => f.write_str("cluster"),
            Lane::Worker(w) => write!(f, "{w}"),
            Lane::Host => f.write_str("host"),
            Lane::Disk => f.write_str("disk"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    // busy time of the serving group
    Prefill,
    Decode,
    CheckpointStall,
    BackpressureStall,
    /// Whole recovery episode, restart included.
    Recovery,
    WastedCompute,
    // detail
    Restart,
    ComputeChunk,
    Gather,
    Encode,
    Barrier,
    Offload,
    ReplicaWrite,
    Recompute,
    FetchParity,
    Reconstruct,
    ReplicaRestore,
    Resume,
    Failure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventClass {
    Inference,
    Overhead,
    Detail,
}

impl EventKind {
    pub fn class(self) -> EventClass {
        use EventKind::*;
        match self {
            Prefill | Decode => EventClass::Inference,
            CheckpointStall | BackpressureStall | Recovery | WastedCompute => EventClass::Overhead,
            _ => EventClass::Detail,
        }
    }

    /// Whether the event may overlap other work on its lane.
    pub fn overlappable(self) -> bool {
        matches!(self, EventKind::Offload | EventKind::FetchParity | EventKind::Barrier | EventKind::Resume | EventKind::Failure)
    }

    pub fn as_str(self) -> &'static str {
        use EventKind::*;
        match self {
            Prefill => "prefill",
            Decode => "decode",
            CheckpointStall => "checkpoint_stall",
            BackpressureStall => "backpressure_stall",
            Restart => "restart",
            Recovery => "recovery",
            WastedCompute => "wasted_compute",
            ComputeChunk => "compute_chunk",
            Gather => "gather",
            Encode => "encode",
            Barrier => "barrier",
            Offload => "offload",
            ReplicaWrite => "replica_write",
            Recompute => "recompute",
            FetchParity => "fetch_parity",
            Reconstruct => "reconstruct",
            ReplicaRestore => "replica_restore",
            Resume => "resume",
            Failure => "failure",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub kind: EventKind,
    pub lane: Lane,
    pub start: f64,
    pub duration: f64,
    pub request_id: Option<u64>,
    pub chunk_id: Option<u32>,
}

impl Event {
    pub fn new(kind: EventKind, lane: Lane, start: f64, duration: f64) -> Self {
        Event { kind, lane, start, duration, request_id: None, chunk_id: None }
    }

    pub fn request(mut self, id: u64) -> Self {
        self.request_id = Some(id);
        self
    }

    pub fn chunk(mut self, id: u32) -> Self {
        self.chunk_id = Some(id);
        self
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Append-only event log.
#[derive(Clone, Debug, Default)]
pub struct Timeline {
    events: Vec<Event>,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Event) {
        debug_assert!(e.duration >= 0.0 && e.start.is_finite());
        self.events.push(e);
    }

    pub fn extend<I: IntoIterator<Item = Event>>(&mut self, events: I) {
        for e in events {
            self.push(e);
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sum of durations of events of `kind`.
    pub fn total(&self, kind: EventKind) -> f64 {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.duration).sum()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// CSV with columns `time,worker,kind,chunk_id,request_id,duration`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,worker,kind,chunk_id,request_id,duration")?;
        for e in &self.events {
            let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.start,
                e.lane,
                e.kind,
                opt(e.chunk_id.map(u64::from)),
                opt(e.request_id),
                e.duration
            )?;
        }
        Ok(())
    }
}

impl FromIterator<Event> for Timeline {
    fn from_iter<I: IntoIterator<Item = Event>>(iter: I) -> Self {
        Timeline { events: iter.into_iter().collect() }
    }
}

/// Returns the first pair of overlapping non-overlappable events on the
/// same worker lane, if any.
pub fn find_worker_overlap(events: &[Event]) -> Option<(Event, Event)> {
    let mut by_lane: std::collections::BTreeMap<usize, Vec<&Event>> = Default::default();
    for e in events.iter().filter(|e| !e.kind.overlappable() && e.duration > 0.0) {
        if let Lane::Worker(w) = e.lane {
            by_lane.entry(w).or_default().push(e);
        }
    }
    const EPS: f64 = 1e-12;
    for evs in by_lane.values_mut() {
        evs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for pair in evs.windows(2) {
            if pair[1].start < pair[0].end() - EPS {
                return Some((pair[0].clone(), pair[1].clone()));
            }
        }
    }
    None
}
