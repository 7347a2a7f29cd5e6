//! Chunk-level checkpointing.
//!
//! After every worker finishes its slice of a chunk, the slices are gathered
//! on one parity worker, encoded, and the workers synchronise; the parity
//! then drains to the host tier asynchronously while the next chunk
//! computes. The parity worker rotates round-robin over the group.

use thiserror::Error;

use crate::coding::{Codec, CodingError, CodingScheme};
use crate::cost::{CostError, CostModel};
use crate::kv::{chunk_count, ChunkId, KvChunkSlice, KvError, KvGenerator, KvState, ModelConfig, TokenBuffer};
use crate::sim::TraceRequest;
use crate::store::{ParityChunk, ParityStore, StoreError};
use crate::timeline::{Event, EventKind, Lane, Timeline};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("invalid checkpoint configuration: {0}")]
    Config(String),
    #[error("slice for worker {worker} of chunk {chunk} is missing")]
    MissingSlice { chunk: ChunkId, worker: usize },
    #[error("inconsistent chunk slices: {0}")]
    SliceMismatch(String),
    #[error("host tier exhausted at request {request_id} chunk {chunk_id}: {source}")]
    HostTierExhausted { request_id: u64, chunk_id: ChunkId, source: StoreError },
    #[error("decode checkpointing is disabled")]
    DecodeDisabled,
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Index of the worker that gathers and encodes the next chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssignmentState {
    next_worker: usize,
}

impl AssignmentState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_worker(&self) -> usize {
        self.next_worker
    }

    /// Return the current worker and move on to the next one (mod `workers`).
    pub fn advance(&mut self, workers: usize) -> usize {
        debug_assert!(workers >= 1);
        let w = self.next_worker;
        self.next_worker = (w + 1) % workers;
        w
    }
}

pub fn next_parity_worker(mut state: AssignmentState, workers: usize) -> (usize, AssignmentState) {
    let w = state.advance(workers);
    (w, state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointConfig {
    pub scheme: CodingScheme,
    /// Tokens per chunk (`m`).
    pub chunk_size: usize,
    /// Model whose slice sizes drive the cost model.
    pub model: ModelConfig,
    pub cost: CostModel,
    pub checkpoint_decode: bool,
}

impl CheckpointConfig {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        self.model.validate()?;
        self.cost.validate()?;
        if self.chunk_size == 0 {
            return Err(KvError::ZeroChunkSize.into());
        }
        if self.scheme.data_shards() != self.model.tp_degree {
            return Err(CheckpointError::Config(format!(
                "scheme has n = {} data shards but tp_degree is {}",
                self.scheme.data_shards(),
                self.model.tp_degree
            )));
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.model.tp_degree
    }

    /// Active bytes one worker holds for a chunk with `valid_tokens`.
    pub fn active_slice_bytes(&self, valid_tokens: usize) -> usize {
        self.model.worker_bytes_per_token() * valid_tokens
    }
}

/// Timing of one chunk checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSchedule {
    pub parity_worker: usize,
    /// When the group resumes computing (after the post-encode barrier).
    pub resume_at: f64,
    pub offload_start: f64,
    /// When the parity is resident in the host tier.
    pub offload_end: f64,
    pub events: Vec<Event>,
}

impl ChunkSchedule {
    pub fn stall(&self) -> f64 {
        self.events.iter().filter(|e| e.kind == EventKind::CheckpointStall).map(|e| e.duration).sum()
    }
}

/// Lay out gather, encode, barrier and offload for one chunk whose compute
/// finished at `compute_end`. `host_free_at` is when the host link is next
/// idle; offloads queue behind each other.
#[allow(clippy::too_many_arguments)]
pub fn schedule_checkpoint(
    cost: &CostModel,
    scheme: &CodingScheme,
    request_id: u64,
    chunk: ChunkId,
    parity_worker: usize,
    slice_bytes: usize,
    compute_end: f64,
    host_free_at: f64,
) -> ChunkSchedule {
    let n = scheme.data_shards();
    let gather = cost.gather_time(n - 1, slice_bytes);
    let encode = cost.encode_time(n, slice_bytes);
    let encode_start = compute_end + gather;
    let resume_at = encode_start + encode;
    let offload_start = resume_at.max(host_free_at);
    let offload = cost.parity_offload(scheme, slice_bytes);
    let tag = |e: Event| e.request(request_id).chunk(chunk.0);
    let events = vec![
        tag(Event::new(EventKind::Gather, Lane::Worker(parity_worker), compute_end, gather)),
        tag(Event::new(EventKind::Encode, Lane::Worker(parity_worker), encode_start, encode)),
        tag(Event::new(EventKind::Barrier, Lane::Cluster, resume_at, 0.0)),
        tag(Event::new(EventKind::Offload, Lane::Host, offload_start, offload)),
        tag(Event::new(EventKind::CheckpointStall, Lane::Cluster, compute_end, resume_at - compute_end)),
    ];
    ChunkSchedule { parity_worker, resume_at, offload_start, offload_end: offload_start + offload, events }
}

#[derive(Clone, Debug)]
pub struct ChunkCheckpoint {
    pub parity: ParityChunk,
    pub schedule: ChunkSchedule,
}

fn check_slices(slices: &[KvChunkSlice], workers: usize) -> Result<(), CheckpointError> {
    let first = slices.first().ok_or(CheckpointError::MissingSlice { chunk: ChunkId(0), worker: 0 })?;
    for w in 0..workers {
        match slices.get(w) {
            Some(s) if s.worker == w => {}
            _ => return Err(CheckpointError::MissingSlice { chunk: first.chunk_id, worker: w }),
        }
    }
    if slices.len() != workers {
        return Err(CheckpointError::SliceMismatch(format!("{} slices for {workers} workers", slices.len())));
    }
    for s in slices {
        if s.chunk_id != first.chunk_id || s.request_id != first.request_id {
            return Err(CheckpointError::SliceMismatch("slices belong to different chunks".into()));
        }
        if s.bytes.len() != first.bytes.len() || s.valid_tokens != first.valid_tokens {
            return Err(CheckpointError::SliceMismatch(format!("worker {} slice shape differs", s.worker)));
        }
        if !s.layout.is_masked(&s.bytes, s.valid_tokens) {
            return Err(CheckpointError::SliceMismatch(format!("worker {} slice is not padded", s.worker)));
        }
    }
    Ok(())
}

/// Gather, encode and schedule the checkpoint of one chunk.
pub fn checkpoint_chunk(
    slices: &[KvChunkSlice],
    config: &CheckpointConfig,
    state: &mut AssignmentState,
    compute_end: f64,
    host_free_at: f64,
) -> Result<ChunkCheckpoint, CheckpointError> {
    check_slices(slices, config.workers())?;
    let first = &slices[0];
    let data: Vec<&[u8]> = slices.iter().map(|s| s.bytes.as_slice()).collect();
    let parity = Codec::new(config.scheme).encode(&data)?;
    let parity = ParityChunk::new(first.request_id, first.chunk_id, config.scheme, parity, first.valid_tokens);
    let worker = state.advance(config.workers());
    let schedule = schedule_checkpoint(
        &config.cost,
        &config.scheme,
        first.request_id,
        first.chunk_id,
        worker,
        config.active_slice_bytes(first.valid_tokens),
        compute_end,
        host_free_at,
    );
    Ok(ChunkCheckpoint { parity, schedule })
}

fn store_parity(store: &mut ParityStore, parity: ParityChunk, at: f64, timeline: &mut Timeline) -> Result<(), CheckpointError> {
    let (request_id, chunk_id) = (parity.request_id, parity.chunk_id);
    store.put(parity).map_err(|source| {
        timeline.push(Event::new(EventKind::BackpressureStall, Lane::Cluster, at, 0.0).request(request_id).chunk(chunk_id.0));
        CheckpointError::HostTierExhausted { request_id, chunk_id, source }
    })
}

/// Outcome of a checkpointed prefill.
#[derive(Clone, Debug)]
pub struct PrefillRun {
    pub timeline: Timeline,
    /// Ground-truth slices as they sit on the workers.
    pub kv: KvState,
    pub assignment: AssignmentState,
    /// Last chunk computed and its checkpoint barrier passed.
    pub prefill_end: f64,
    /// Last parity resident in the host tier.
    pub durable_at: f64,
    pub parity_workers: Vec<usize>,
}

/// Run the prefill of `request` chunk by chunk with a checkpoint after each
/// chunk, starting at virtual time `start`.
pub fn run_prefill_with_checkpointing(
    request: &TraceRequest,
    config: &CheckpointConfig,
    store: &mut ParityStore,
    generator: &KvGenerator,
    start: f64,
) -> Result<PrefillRun, CheckpointError> {
    config.validate()?;
    let m = config.chunk_size;
    let chunks = chunk_count(request.input_len, m)?;
    let layout = config.model.layout(m);
    let workers = config.workers();

    let mut timeline = Timeline::new();
    let mut kv = KvState::new(request.id);
    let mut state = AssignmentState::new();
    let mut parity_workers = Vec::with_capacity(chunks);
    let mut clock = start;
    let mut host_free = start;

    for i in 0..chunks {
        let chunk = ChunkId(i as u32);
        let valid = (request.input_len - i * m).min(m);
        let compute = config.cost.prefill_time(valid);
        for w in 0..workers {
            timeline.push(Event::new(EventKind::ComputeChunk, Lane::Worker(w), clock, compute).request(request.id).chunk(chunk.0));
        }
        timeline.push(Event::new(EventKind::Prefill, Lane::Cluster, clock, compute).request(request.id).chunk(chunk.0));
        let compute_end = clock + compute;

        let slices = generator.chunk(request.id, chunk, workers, layout, valid);
        let cp = checkpoint_chunk(&slices, config, &mut state, compute_end, host_free)?;
        timeline.extend(cp.schedule.events.iter().cloned());
        store_parity(store, cp.parity, cp.schedule.offload_end, &mut timeline)?;
        kv.push_chunk(&slices);
        parity_workers.push(cp.schedule.parity_worker);

        host_free = cp.schedule.offload_end;
        clock = cp.schedule.resume_at;
    }

    Ok(PrefillRun { timeline, kv, assignment: state, prefill_end: clock, durable_at: host_free.max(clock), parity_workers })
}

/// Decode-side checkpointing: tokens are buffered per worker and the buffer
/// is checkpointed as one chunk every `m` tokens, plus a final partial
/// chunk when the request ends.
#[derive(Clone, Debug)]
pub struct DecodeCheckpointer {
    request_id: u64,
    buffer: TokenBuffer,
    next_chunk: ChunkId,
}

impl DecodeCheckpointer {
    /// `first_chunk` continues the request's chunk numbering after prefill.
    pub fn new(request_id: u64, config: &CheckpointConfig, first_chunk: ChunkId) -> Self {
        DecodeCheckpointer {
            request_id,
            buffer: TokenBuffer::new(config.model.layout(config.chunk_size), config.workers()),
            next_chunk: first_chunk,
        }
    }

    pub fn buffered_tokens(&self) -> usize {
        self.buffer.len()
    }

    pub fn next_chunk(&self) -> ChunkId {
        self.next_chunk
    }

    /// Buffer one decode token; when the buffer reaches a full chunk it is
    /// checkpointed at time `now` and stored.
    #[allow(clippy::too_many_arguments)]
    pub fn checkpoint_decode_step<B: AsRef<[u8]>>(
        &mut self,
        new_token_kv: &[B],
        config: &CheckpointConfig,
        state: &mut AssignmentState,
        store: &mut ParityStore,
        kv: &mut KvState,
        now: f64,
        host_free_at: f64,
    ) -> Result<Option<ChunkCheckpoint>, CheckpointError> {
        if !config.checkpoint_decode {
            return Err(CheckpointError::DecodeDisabled);
        }
        self.buffer.push(new_token_kv)?;
        if self.buffer.is_full() {
            self.flush(config, state, store, kv, now, host_free_at).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Checkpoint whatever is buffered (request finished mid-chunk).
    pub fn finish(
        &mut self,
        config: &CheckpointConfig,
        state: &mut AssignmentState,
        store: &mut ParityStore,
        kv: &mut KvState,
        now: f64,
        host_free_at: f64,
    ) -> Result<Option<ChunkCheckpoint>, CheckpointError> {
        if !config.checkpoint_decode {
            return Err(CheckpointError::DecodeDisabled);
        }
        if self.buffer.is_empty() {
            return Ok(None);
        }
        self.flush(config, state, store, kv, now, host_free_at).map(Some)
    }

    fn flush(
        &mut self,
        config: &CheckpointConfig,
        state: &mut AssignmentState,
        store: &mut ParityStore,
        kv: &mut KvState,
        now: f64,
        host_free_at: f64,
    ) -> Result<ChunkCheckpoint, CheckpointError> {
        let slices = self.buffer.take(self.request_id, self.next_chunk);
        let cp = checkpoint_chunk(&slices, config, state, now, host_free_at)?;
        let mut scratch = Timeline::new();
        store_parity(store, cp.parity.clone(), cp.schedule.offload_end, &mut scratch)?;
        kv.push_chunk(&slices);
        self.next_chunk = ChunkId(self.next_chunk.0 + 1);
        Ok(cp)
    }
}
