//! Deterministic cluster simulation.
//!
//! One tensor-parallel group serves a trace first come, first served on a
//! virtual clock. Each strategy decides what happens at chunk boundaries
//! (checkpoint or not) and after a failure (how lost KV comes back).
//!
//! Timing always follows the configured model. With a data model set, the
//! GhostServe strategy also runs the real data path on a scaled-down KV
//! layout: slices are generated, encoded, stored, erased on failure,
//! reconstructed and compared against ground truth.

mod failure;
mod metrics;
mod trace;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{checkpoint_chunk, schedule_checkpoint, AssignmentState, CheckpointConfig, CheckpointError};
use crate::coding::CodingScheme;
use crate::kv::{chunk_count, ChunkId, KvError, KvGenerator, KvState, ModelConfig, SliceLayout};
use crate::recovery::{recover, FailureEvent, Phase, RecoveryError, RecoveryMode};
use crate::store::ParityStore;
use crate::timeline::{Event, EventKind, Lane, Timeline};

pub use failure::{inject_failures, FailureInjectorConfig, InjectedFailure};
pub use metrics::{compute_eitr, compute_mttr, percentile, MetricsReport};
pub use trace::{generate_trace, LengthRange, RequestClass, TraceConfig, TraceRequest};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation configuration: {0}")]
    Config(String),
    #[error("request {request_id}: recovered KV differs from ground truth")]
    Verification { request_id: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No checkpoints; a failure restarts the request from token 0.
    RecomputeOnly,
    /// Full KV copy written to host memory after every chunk.
    ReplicateHost,
    /// Full KV copy written to disk after every chunk.
    ReplicateDisk,
    Ghostserve { scheme: CodingScheme },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RecomputeOnly => "recompute_only",
            Strategy::ReplicateHost => "replicate_host",
            Strategy::ReplicateDisk => "replicate_disk",
            Strategy::Ghostserve { .. } => "ghostserve",
        }
    }

    /// Stored bytes per byte of KV.
    pub fn overhead_ratio(&self) -> f64 {
        match self {
            Strategy::RecomputeOnly => 0.0,
            Strategy::ReplicateHost | Strategy::ReplicateDisk => 1.0,
            Strategy::Ghostserve { scheme } => scheme.overhead_ratio(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a strategy name; `ghostserve` takes its scheme from `scheme`.
pub fn parse_strategy(name: &str, scheme: CodingScheme) -> Result<Strategy, SimError> {
    match name {
        "recompute_only" => Ok(Strategy::RecomputeOnly),
        "replicate_host" => Ok(Strategy::ReplicateHost),
        "replicate_disk" => Ok(Strategy::ReplicateDisk),
        "ghostserve" => Ok(Strategy::Ghostserve { scheme }),
        other => Err(SimError::Config(format!("unknown strategy {other:?}"))),
    }
}

impl FromStr for Phase {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            other => Err(SimError::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Timing model. Its scheme is replaced by the strategy's.
    pub checkpoint: CheckpointConfig,
    /// Scaled-down model for the GhostServe data path, `None` to skip it.
    pub data_model: Option<ModelConfig>,
    pub data_seed: u64,
}

impl SimConfig {
    pub fn new(checkpoint: CheckpointConfig) -> Self {
        let tp = checkpoint.model.tp_degree;
        SimConfig { checkpoint, data_model: Some(Self::small_data_model(tp)), data_seed: 0 }
    }

    /// Four bytes per token per worker.
    pub fn small_data_model(tp: usize) -> ModelConfig {
        ModelConfig { layers: 1, kv_heads: tp, head_dim: 1, bytes_per_elem: crate::kv::FP16_BYTES, tp_degree: tp }
    }

    fn validate(&self, strategy: &Strategy) -> Result<(), SimError> {
        self.checkpoint.validate()?;
        if let Some(d) = &self.data_model {
            d.validate()?;
            if d.tp_degree != self.checkpoint.model.tp_degree {
                return Err(SimError::Config("data model tp_degree differs from the timing model".into()));
            }
        }
        if let Strategy::Ghostserve { scheme } = strategy {
            if scheme.data_shards() != self.checkpoint.model.tp_degree {
                return Err(SimError::Config(format!(
                    "ghostserve scheme has n = {} but tp_degree is {}",
                    scheme.data_shards(),
                    self.checkpoint.model.tp_degree
                )));
            }
        }
        Ok(())
    }
}

/// One recovery episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryRecord {
    pub request_id: u64,
    pub phase: Phase,
    pub chunks: usize,
    pub recomputed: usize,
    pub mode: Option<RecoveryMode>,
    pub duration: f64,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub timeline: Timeline,
    pub recoveries: Vec<RecoveryRecord>,
}

struct DataPlane {
    generator: KvGenerator,
    layout: SliceLayout,
    store: ParityStore,
}

struct Engine {
    strategy: Strategy,
    cfg: CheckpointConfig,
    data: Option<DataPlane>,
    timeline: Timeline,
    clock: f64,
    host_free: f64,
    assignment: AssignmentState,
    live_bytes: u64,
    peak_bytes: u64,
    io_checkpoint: u64,
    io_recovery: u64,
    recoveries: Vec<RecoveryRecord>,
}

/// Per-request progress.
struct Request {
    id: u64,
    kv: KvState,
    /// Modeled bytes this request keeps in the store.
    stored: u64,
    /// `(chunk, parity worker, offload end)` of offloads still in flight.
    pending: Vec<(ChunkId, usize, f64)>,
    recovery_time: f64,
}

impl Engine {
    fn workers(&self) -> usize {
        self.cfg.workers()
    }

    fn cluster(&mut self, kind: EventKind, start: f64, duration: f64, req: u64, chunk: Option<u32>) {
        let mut e = Event::new(kind, Lane::Cluster, start, duration).request(req);
        e.chunk_id = chunk;
        self.timeline.push(e);
    }

    fn store_bytes(&mut self, req: &mut Request, bytes: u64) {
        req.stored += bytes;
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    /// Checkpoint of a completed chunk at the current clock.
    fn checkpoint(&mut self, req: &mut Request, chunk: ChunkId, valid: usize) -> Result<(), SimError> {
        let active = self.cfg.active_slice_bytes(valid);
        let n = self.workers();
        let replica = |bw_disk: bool, me: &mut Self, req: &mut Request| {
            let bytes = n * active;
            let (d, lane) = if bw_disk {
                (me.cfg.cost.disk_transfer_time(bytes), Lane::Disk)
            } else {
                (me.cfg.cost.host_transfer_time(bytes), Lane::Host)
            };
            me.timeline.push(Event::new(EventKind::ReplicaWrite, lane, me.clock, d).request(req.id).chunk(chunk.0));
            me.cluster(EventKind::CheckpointStall, me.clock, d, req.id, Some(chunk.0));
            me.clock += d;
            me.io_checkpoint += bytes as u64;
            me.store_bytes(req, bytes as u64);
        };
        match self.strategy {
            Strategy::RecomputeOnly => {}
            Strategy::ReplicateHost => replica(false, self, req),
            Strategy::ReplicateDisk => replica(true, self, req),
            Strategy::Ghostserve { scheme } => {
                let schedule = match &mut self.data {
                    Some(dp) => {
                        let slices = dp.generator.chunk(req.id, chunk, n, dp.layout, valid);
                        let cp = checkpoint_chunk(&slices, &self.cfg, &mut self.assignment, self.clock, self.host_free)?;
                        dp.store.put(cp.parity).map_err(|source| CheckpointError::HostTierExhausted {
                            request_id: req.id,
                            chunk_id: chunk,
                            source,
                        })?;
                        req.kv.push_chunk(&slices);
                        cp.schedule
                    }
                    None => {
                        let w = self.assignment.advance(n);
                        schedule_checkpoint(&self.cfg.cost, &scheme, req.id, chunk, w, active, self.clock, self.host_free)
                    }
                };
                req.pending.retain(|&(_, _, end)| end > self.clock);
                req.pending.push((chunk, schedule.parity_worker, schedule.offload_end));
                self.timeline.extend(schedule.events);
                self.host_free = schedule.offload_end;
                self.clock = schedule.resume_at;
                let bytes = (scheme.parity_shards() * active) as u64;
                self.io_checkpoint += bytes;
                self.store_bytes(req, bytes);
            }
        }
        Ok(())
    }

    /// Handle a failure after `wasted` seconds of lost work on the current
    /// unit. `chunks` completed checkpoints exist, `context` tokens were
    /// processed before the failing unit.
    #[allow(clippy::too_many_arguments)]
    fn fail(
        &mut self,
        req: &mut Request,
        failure: &InjectedFailure,
        phase: Phase,
        wasted: f64,
        chunks: &[usize],
        buffered: usize,
        context: usize,
    ) -> Result<(), SimError> {
        if wasted > 0.0 {
            self.cluster(EventKind::WastedCompute, self.clock, wasted, req.id, None);
        }
        self.clock += wasted;
        for &w in &failure.workers {
            self.timeline.push(Event::new(EventKind::Failure, Lane::Worker(w), self.clock, 0.0).request(req.id));
        }
        let start = self.clock;
        let cost = self.cfg.cost;
        let n = self.workers();
        let bpt = self.cfg.model.worker_bytes_per_token();
        let (duration, recomputed, mode) = match self.strategy {
            Strategy::RecomputeOnly => {
                self.timeline.push(Event::new(EventKind::Restart, Lane::Cluster, start, cost.restart_overhead).request(req.id));
                let d = cost.prefill_time(context);
                self.cluster(EventKind::Recompute, start + cost.restart_overhead, d, req.id, None);
                (cost.restart_overhead + d, chunks.len(), None)
            }
            Strategy::ReplicateHost | Strategy::ReplicateDisk => {
                let disk = self.strategy == Strategy::ReplicateDisk;
                let lane = if disk { Lane::Disk } else { Lane::Host };
                self.timeline.push(Event::new(EventKind::Restart, Lane::Cluster, start, cost.restart_overhead).request(req.id));
                let mut t = start + cost.restart_overhead;
                for (i, &v) in chunks.iter().enumerate() {
                    let bytes = n * bpt * v;
                    let d = if disk { cost.disk_transfer_time(bytes) } else { cost.host_transfer_time(bytes) };
                    self.timeline.push(Event::new(EventKind::ReplicaRestore, lane, t, d).request(req.id).chunk(i as u32));
                    t += d;
                    self.io_recovery += bytes as u64;
                }
                if buffered > 0 {
                    let d = cost.prefill_time(buffered);
                    self.cluster(EventKind::Recompute, t, d, req.id, None);
                    t += d;
                }
                (t - start, 0, None)
            }
            Strategy::Ghostserve { .. } => {
                let failed: BTreeSet<usize> = failure.workers.iter().copied().collect();
                let event = FailureEvent {
                    request_id: req.id,
                    failed_workers: failed.clone(),
                    at_chunk: chunks.len(),
                    at_time: start,
                    phase,
                    buffered_tokens: buffered,
                };
                let outcome = match &mut self.data {
                    Some(dp) => {
                        // Parity still in flight from a failed parity worker is lost.
                        for &(chunk, w, end) in &req.pending {
                            if end > start && failed.contains(&w) {
                                dp.store.remove(req.id, chunk);
                            }
                        }
                        for &w in &failed {
                            req.kv.erase_worker(w);
                        }
                        let (generator, layout) = (dp.generator, dp.layout);
                        let id = req.id;
                        let oracle = |c: ChunkId, w: usize| generator.slice(id, c, w, layout, chunks[c.index()]).bytes;
                        let out = recover(&event, &self.cfg, &dp.store, &mut req.kv, &oracle, start)?;
                        for c in 0..chunks.len() {
                            let c = ChunkId(c as u32);
                            for &w in &failed {
                                if req.kv.slice(c, w) != Some(oracle(c, w).as_slice()) {
                                    return Err(SimError::Verification { request_id: req.id });
                                }
                            }
                        }
                        out
                    }
                    None => {
                        let mut kv = timing_only_kv(req.id, chunks, n);
                        for &w in &failed {
                            kv.erase_worker(w);
                        }
                        let store = timing_only_store(req.id, chunks, &self.cfg.scheme, &req.pending, &failed, start);
                        let zeros = |_: ChunkId, _: usize| Vec::new();
                        recover(&event, &self.cfg, &store, &mut kv, &zeros, start)?
                    }
                };
                self.io_recovery += outcome.fetched_bytes;
                self.timeline.extend(outcome.timeline.into_events().into_iter().filter(|e| !matches!(e.kind, EventKind::Recovery | EventKind::Resume)));
                (outcome.duration, outcome.plan.r, Some(outcome.plan.mode))
            }
        };
        self.cluster(EventKind::Recovery, start, duration, req.id, None);
        self.timeline.push(Event::new(EventKind::Resume, Lane::Cluster, start + duration, 0.0).request(req.id));
        self.clock = start + duration;
        req.recovery_time += duration;
        self.recoveries.push(RecoveryRecord { request_id: req.id, phase, chunks: chunks.len(), recomputed, mode, duration });
        Ok(())
    }

    fn serve(&mut self, t: &TraceRequest, failure: Option<&InjectedFailure>) -> Result<(f64, f64, f64), SimError> {
        let m = self.cfg.chunk_size;
        let cost = self.cfg.cost;
        let prefill_chunks = chunk_count(t.input_len, m)?;
        let units = prefill_chunks + t.output_len;
        let fail_at = failure.map(|f| (f, f.locate(units)));
        self.clock = self.clock.max(t.arrival);
        let mut req = Request { id: t.id, kv: KvState::new(t.id), stored: 0, pending: Vec::new(), recovery_time: 0.0 };
        // Valid tokens of every checkpointed chunk so far.
        let mut chunks: Vec<usize> = Vec::new();

        for i in 0..prefill_chunks {
            let valid = (t.input_len - i * m).min(m);
            let c = cost.prefill_time(valid);
            if let Some((f, (unit, frac))) = fail_at {
                if unit == i {
                    self.fail(&mut req, f, Phase::Prefill, frac * c, &chunks, 0, i * m)?;
                }
            }
            for w in 0..self.workers() {
                self.timeline.push(Event::new(EventKind::ComputeChunk, Lane::Worker(w), self.clock, c).request(t.id).chunk(i as u32));
            }
            self.cluster(EventKind::Prefill, self.clock, c, t.id, Some(i as u32));
            self.clock += c;
            self.checkpoint(&mut req, ChunkId(i as u32), valid)?;
            chunks.push(valid);
        }
        let prefill_end = self.clock;

        let mut decode_fail = fail_at.and_then(|(f, (unit, frac))| unit.checked_sub(prefill_chunks).map(|j| (f, j, frac)));
        let step = cost.decode_per_token;
        let mut done = 0;
        while done < t.output_len {
            let chunk_end = if self.cfg.checkpoint_decode { (done / m + 1) * m } else { usize::MAX };
            let mut seg_end = chunk_end.min(t.output_len);
            if let Some((_, j, _)) = decode_fail {
                if (done..seg_end).contains(&j) {
                    seg_end = j;
                }
            }
            if seg_end > done {
                self.cluster(EventKind::Decode, self.clock, (seg_end - done) as f64 * step, t.id, None);
                self.clock += (seg_end - done) as f64 * step;
                done = seg_end;
            }
            if let Some((f, j, frac)) = decode_fail {
                if done == j {
                    decode_fail = None;
                    let buffered = if self.cfg.checkpoint_decode { j % m } else { j };
                    self.fail(&mut req, f, Phase::Decode, frac * step, &chunks, buffered, t.input_len + j)?;
                    continue;
                }
            }
            let at_boundary = done == chunk_end || done == t.output_len;
            if self.cfg.checkpoint_decode && at_boundary {
                let valid = done - (done - 1) / m * m;
                let id = ChunkId(chunks.len() as u32);
                self.checkpoint(&mut req, id, valid)?;
                chunks.push(valid);
            }
        }

        self.live_bytes -= req.stored;
        if let Some(dp) = &mut self.data {
            dp.store.evict_request(t.id);
        }
        Ok((prefill_end - t.arrival, self.clock - prefill_end, req.recovery_time))
    }
}

fn timing_only_kv(request_id: u64, chunks: &[usize], workers: usize) -> KvState {
    let mut kv = KvState::new(request_id);
    for (i, &v) in chunks.iter().enumerate() {
        let layout = SliceLayout { blocks: 1, tokens: v.max(1), token_bytes: 0 };
        let slices: Vec<_> = (0..workers)
            .map(|w| crate::kv::KvChunkSlice {
                request_id,
                chunk_id: ChunkId(i as u32),
                worker: w,
                layout,
                bytes: Vec::new(),
                valid_tokens: v,
            })
            .collect();
        kv.push_chunk(&slices);
    }
    kv
}

fn timing_only_store(
    request_id: u64,
    chunks: &[usize],
    scheme: &CodingScheme,
    pending: &[(ChunkId, usize, f64)],
    failed: &BTreeSet<usize>,
    at: f64,
) -> ParityStore {
    let mut store = ParityStore::unbounded();
    for (i, &v) in chunks.iter().enumerate() {
        let id = ChunkId(i as u32);
        let lost = pending.iter().any(|&(c, w, end)| c == id && end > at && failed.contains(&w));
        if !lost {
            let parity = vec![Vec::new(); scheme.parity_shards()];
            store.put(crate::store::ParityChunk::new(request_id, id, *scheme, parity, v)).expect("unbounded store");
        }
    }
    store
}

/// Serve `trace` under `strategy`. Failures name requests by id; at most
/// one failure per request is applied.
pub fn simulate(
    trace: &[TraceRequest],
    strategy: Strategy,
    config: &SimConfig,
    failures: &[InjectedFailure],
) -> Result<SimOutput, SimError> {
    config.validate(&strategy)?;
    let mut cfg = config.checkpoint.clone();
    if let Strategy::Ghostserve { scheme } = strategy {
        cfg.scheme = scheme;
    }
    let data = match (strategy, &config.data_model) {
        (Strategy::Ghostserve { .. }, Some(model)) => Some(DataPlane {
            generator: KvGenerator::new(config.data_seed),
            layout: model.layout(cfg.chunk_size),
            store: ParityStore::unbounded(),
        }),
        _ => None,
    };
    let mut engine = Engine {
        strategy,
        cfg,
        data,
        timeline: Timeline::new(),
        clock: 0.0,
        host_free: 0.0,
        assignment: AssignmentState::new(),
        live_bytes: 0,
        peak_bytes: 0,
        io_checkpoint: 0,
        io_recovery: 0,
        recoveries: Vec::new(),
    };

    let mut prefill_latency = Vec::with_capacity(trace.len());
    let mut decode_latency = Vec::with_capacity(trace.len());
    let mut recovery_latency = Vec::with_capacity(trace.len());
    let mut end_to_end = Vec::with_capacity(trace.len());
    for t in trace {
        let failure = failures.iter().find(|f| f.request_id == t.id);
        let (p, d, r) = engine.serve(t, failure)?;
        prefill_latency.push(p);
        decode_latency.push(d);
        recovery_latency.push(r);
        end_to_end.push(p + d);
    }

    let events = engine.timeline.events();
    let report = MetricsReport {
        prefill_latency,
        decode_latency,
        recovery_latency,
        p50: percentile(&end_to_end, 50.0),
        p99: percentile(&end_to_end, 99.0),
        eitr: compute_eitr(events),
        mttr: compute_mttr(events),
        io_bytes_checkpoint: engine.io_checkpoint,
        io_bytes_recovery: engine.io_recovery,
        parity_store_peak_bytes: engine.peak_bytes,
    };
    Ok(SimOutput { report, timeline: engine.timeline, recoveries: engine.recoveries })
}

/// Checkpoint-induced prefill overhead of one failure-free request of
/// `input_len` tokens: stall time plus any offload still draining after the
/// last chunk.
pub fn prefill_checkpoint_overhead(strategy: Strategy, input_len: usize, config: &CheckpointConfig) -> Result<f64, SimError> {
    let mut cfg = SimConfig { checkpoint: config.clone(), data_model: None, data_seed: 0 };
    cfg.checkpoint.checkpoint_decode = false;
    let req = TraceRequest { id: 0, arrival: 0.0, input_len, output_len: 1, class: RequestClass::LongInShortOut };
    let out = simulate(&[req], strategy, &cfg, &[])?;
    let stall = out.timeline.total(EventKind::CheckpointStall);
    let prefill_end = out
        .timeline
        .events()
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Prefill | EventKind::CheckpointStall))
        .map(Event::end)
        .fold(0.0, f64::max);
    let drained = out.timeline.of_kind(EventKind::Offload).map(Event::end).fold(0.0, f64::max);
    Ok(stall + (drained - prefill_end).max(0.0))
}
