//! Failure recovery: split the lost chunks between recomputation and
//! parity reconstruction so both paths finish together, then restore the
//! failed workers' slices bit-exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointConfig;
use crate::coding::{Codec, CodingError, CodingScheme, ErasurePattern};
use crate::cost::CostModel;
use crate::kv::{ChunkId, KvState, ModelConfig};
use crate::store::{ParityChunk, ParityStore, StoreError};
use crate::timeline::{Event, EventKind, Lane, Timeline};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("invalid failure: {0}")]
    InvalidFailure(String),
    #[error("surviving slice of worker {worker} for chunk {chunk} is missing")]
    MissingSurvivor { chunk: ChunkId, worker: usize },
    #[error("parity of chunk {0} failed its checksum")]
    ChecksumMismatch(ChunkId),
    #[error("recovered chunk {chunk} differs from the pre-failure state")]
    Verification { chunk: ChunkId },
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub request_id: u64,
    pub failed_workers: BTreeSet<usize>,
    /// Chunks whose checkpoint completed before the failure (`n`).
    pub at_chunk: usize,
    pub at_time: f64,
    pub phase: Phase,
    /// Decode tokens generated since the last checkpointed chunk.
    pub buffered_tokens: usize,
}

impl FailureEvent {
    pub fn validate(&self, workers: usize) -> Result<(), RecoveryError> {
        if self.failed_workers.is_empty() {
            return Err(RecoveryError::InvalidFailure("no failed workers".into()));
        }
        if let Some(&w) = self.failed_workers.iter().find(|&&w| w >= workers) {
            return Err(RecoveryError::InvalidFailure(format!("worker {w} out of range for {workers} workers")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    PureRecompute,
    Hybrid,
    FullRecomputeFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    /// Chunks `[0, r)` are recomputed.
    pub r: usize,
    /// Chunks `[r, n)`, rebuilt from parity.
    pub reconstruct_ids: Vec<ChunkId>,
    pub mode: RecoveryMode,
}

/// Per-chunk cost of each recovery path for one failure.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkCosts {
    pub recompute: Vec<f64>,
    pub reconstruct: Vec<f64>,
}

impl ChunkCosts {
    pub fn uniform(n: usize, recompute: f64, reconstruct: f64) -> Self {
        ChunkCosts { recompute: vec![recompute; n], reconstruct: vec![reconstruct; n] }
    }

    /// Costs of chunks holding `valid_tokens[i]` tokens when `failed`
    /// workers were lost.
    pub fn for_chunks(valid_tokens: &[usize], failed: usize, scheme: &CodingScheme, model: &ModelConfig, cost: &CostModel) -> Self {
        let bpt = model.worker_bytes_per_token();
        ChunkCosts {
            recompute: valid_tokens.iter().map(|&v| cost.prefill_time(v)).collect(),
            reconstruct: valid_tokens
                .iter()
                .map(|&v| reconstruct_chunk_time(cost, scheme, failed, bpt * v))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.recompute.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recompute.is_empty()
    }

    /// Time of the two concurrent lanes when the first `r` chunks are
    /// recomputed.
    pub fn lanes(&self, r: usize) -> (f64, f64) {
        (self.recompute[..r].iter().sum(), self.reconstruct[r..].iter().sum())
    }

    pub fn recovery_time(&self, r: usize) -> f64 {
        let (a, b) = self.lanes(r);
        a.max(b)
    }
}

/// Fetch `failed` parity shards over the host link, gather the survivors
/// onto the restarted worker and decode.
pub fn reconstruct_chunk_time(cost: &CostModel, scheme: &CodingScheme, failed: usize, slice_bytes: usize) -> f64 {
    let n = scheme.data_shards();
    cost.host_transfer_time(failed * slice_bytes)
        + cost.gather_time(n.saturating_sub(failed), slice_bytes)
        + cost.reconstruct_time(n, slice_bytes)
}

/// Number of leading chunks to recompute so that recomputation and
/// reconstruction, running side by side, finish as early as possible.
/// Ties go to the smaller `r`.
///
/// The recompute lane grows with `r` and the reconstruct lane shrinks, so
/// the optimum sits at the first `r` where the recompute lane catches up, or
/// just before it.
pub fn get_recompute_units(costs: &ChunkCosts) -> usize {
    let n = costs.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for c in &costs.recompute {
        prefix.push(prefix.last().unwrap() + c);
    }
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + costs.reconstruct[i];
    }
    let cross = prefix.iter().zip(&suffix).position(|(a, b)| a >= b).unwrap_or(n);
    let f = |r: usize| prefix[r].max(suffix[r]);
    if cross > 0 && f(cross - 1) <= f(cross) {
        cross - 1
    } else {
        cross
    }
}

/// Rebuild the failed workers' slices of one chunk. Padding needs no
/// separate treatment: every shard is zero past `valid_tokens`, and so is
/// any linear combination of them.
pub fn reconstruct_chunk(
    chunk_id: ChunkId,
    surviving: &[Option<&[u8]>],
    parity: &ParityChunk,
    failed: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, Vec<u8>>, RecoveryError> {
    if !parity.verify() {
        return Err(RecoveryError::ChecksumMismatch(chunk_id));
    }
    let scheme = parity.scheme;
    let n = scheme.data_shards();
    let mut shards = BTreeMap::new();
    for (w, s) in surviving.iter().enumerate().take(n) {
        if failed.contains(&w) {
            continue;
        }
        let s = s.ok_or(RecoveryError::MissingSurvivor { chunk: chunk_id, worker: w })?;
        shards.insert(w, s);
    }
    for (j, p) in parity.parity.iter().enumerate() {
        shards.insert(n + j, p.as_slice());
    }
    let mut out = Codec::new(scheme).reconstruct(&shards, &ErasurePattern::new(failed.iter().copied()))?;
    out.retain(|&i, _| i < n);
    Ok(out)
}

pub fn verify_recovery(recovered: &[u8], ground_truth: &[u8]) -> bool {
    recovered == ground_truth
}

#[derive(Clone, Debug)]
pub struct RecoveryOutcome {
    pub plan: RecoveryPlan,
    pub timeline: Timeline,
    /// Restart, both lanes and buffered-token recomputation.
    pub duration: f64,
    pub end: f64,
    /// Parity bytes fetched from the host tier, as modeled.
    pub fetched_bytes: u64,
    /// Restored slices of the failed workers, keyed by `(chunk, worker)`.
    pub recovered: BTreeMap<(ChunkId, usize), Vec<u8>>,
}

fn plan_mode(r: usize, n: usize) -> RecoveryMode {
    if r >= n {
        RecoveryMode::PureRecompute
    } else {
        RecoveryMode::Hybrid
    }
}

/// Recover the failed workers of `failure` starting at `start`.
///
/// `kv` holds the request's chunks `[0, n)` with the failed workers'
/// slices already erased; on success it is complete again. `oracle`
/// supplies ground-truth bytes for recomputed chunks.
pub fn recover(
    failure: &FailureEvent,
    config: &CheckpointConfig,
    store: &ParityStore,
    kv: &mut KvState,
    oracle: &dyn Fn(ChunkId, usize) -> Vec<u8>,
    start: f64,
) -> Result<RecoveryOutcome, RecoveryError> {
    let workers = config.workers();
    failure.validate(workers)?;
    let n = failure.at_chunk;
    if kv.chunk_count() != n {
        return Err(RecoveryError::InvalidFailure(format!("{} chunks resident, failure reports {n}", kv.chunk_count())));
    }
    let scheme = config.scheme;
    let failed = &failure.failed_workers;
    let valid: Vec<usize> = (0..n).map(|i| kv.valid_tokens(ChunkId(i as u32))).collect();
    let costs = ChunkCosts::for_chunks(&valid, failed.len(), &scheme, &config.model, &config.cost);

    let mut r = get_recompute_units(&costs);
    let mut mode = plan_mode(r, n);
    if failed.len() > scheme.max_tolerance() {
        mode = RecoveryMode::FullRecomputeFallback;
    }

    // Rebuild the reconstruct range first; any bad parity turns the whole
    // episode into recomputation so no chunk is left half restored.
    let mut recovered = BTreeMap::new();
    if mode == RecoveryMode::Hybrid {
        for i in r..n {
            let id = ChunkId(i as u32);
            let parity = match store.get(kv.request_id, id) {
                Ok(p) => p,
                Err(StoreError::Missing { .. } | StoreError::ChecksumMismatch { .. }) => {
                    mode = RecoveryMode::FullRecomputeFallback;
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            match reconstruct_chunk(id, &kv.chunk_slices(id), parity, failed) {
                Ok(slices) => recovered.extend(slices.into_iter().map(|(w, b)| ((id, w), b))),
                Err(RecoveryError::ChecksumMismatch(_)) => {
                    mode = RecoveryMode::FullRecomputeFallback;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    if mode == RecoveryMode::FullRecomputeFallback {
        r = n;
        recovered.clear();
    }
    for i in 0..r {
        let id = ChunkId(i as u32);
        for &w in failed {
            recovered.insert((id, w), oracle(id, w));
        }
    }
    for ((id, w), bytes) in &recovered {
        kv.set_slice(*id, *w, bytes.clone());
    }

    // Timing.
    let req = failure.request_id;
    let cost = &config.cost;
    let first_failed = *failed.iter().next().unwrap();
    let mut timeline = Timeline::new();
    timeline.push(Event::new(EventKind::Restart, Lane::Cluster, start, cost.restart_overhead).request(req));
    let lanes_start = start + cost.restart_overhead;

    let mut t = lanes_start;
    for (i, &c) in costs.recompute[..r].iter().enumerate() {
        timeline.push(Event::new(EventKind::Recompute, Lane::Cluster, t, c).request(req).chunk(i as u32));
        t += c;
    }
    let recompute_end = t;

    let bpt = config.model.worker_bytes_per_token();
    let mut fetched_bytes = 0u64;
    let mut t = lanes_start;
    for i in r..n {
        let bytes = bpt * valid[i];
        let fetch = cost.host_transfer_time(failed.len() * bytes);
        timeline.push(Event::new(EventKind::FetchParity, Lane::Host, t, fetch).request(req).chunk(i as u32));
        let rebuild = costs.reconstruct[i] - fetch;
        timeline.push(Event::new(EventKind::Reconstruct, Lane::Worker(first_failed), t + fetch, rebuild).request(req).chunk(i as u32));
        t += costs.reconstruct[i];
        fetched_bytes += (failed.len() * bytes) as u64;
    }
    let reconstruct_end = t;

    let mut end = recompute_end.max(reconstruct_end);
    if failure.buffered_tokens > 0 {
        let d = cost.prefill_time(failure.buffered_tokens);
        timeline.push(Event::new(EventKind::Recompute, Lane::Cluster, end, d).request(req));
        end += d;
    }
    timeline.push(Event::new(EventKind::Resume, Lane::Cluster, end, 0.0).request(req));
    timeline.push(Event::new(EventKind::Recovery, Lane::Cluster, start, end - start).request(req));

    let plan = RecoveryPlan { r, reconstruct_ids: (r..n).map(|i| ChunkId(i as u32)).collect(), mode };
    Ok(RecoveryOutcome { plan, timeline, duration: end - start, end, fetched_bytes, recovered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::run_prefill_with_checkpointing;
    use crate::kv::KvGenerator;
    use crate::sim::{RequestClass, TraceRequest};

    fn sweep(costs: &ChunkCosts) -> usize {
        (0..=costs.len())
            .min_by(|&a, &b| costs.recovery_time(a).total_cmp(&costs.recovery_time(b)).then(a.cmp(&b)))
            .unwrap()
    }

    #[test]
    fn trivial_splits() {
        assert_eq!(get_recompute_units(&ChunkCosts::uniform(0, 1.0, 1.0)), 0);
        assert_eq!(get_recompute_units(&ChunkCosts::uniform(10, 1.0, 0.0)), 0);
        assert_eq!(get_recompute_units(&ChunkCosts::uniform(10, 0.0, 1.0)), 10);
        assert_eq!(get_recompute_units(&ChunkCosts::uniform(10, 1.0, 1.0)), 5);
        // 4 recompute chunks cost 4; 6 reconstruct cost 6 vs 5 and 5: r=5
        assert_eq!(get_recompute_units(&ChunkCosts::uniform(9, 1.0, 1.0)), 4);
    }

    #[test]
    fn matches_sweep_on_mixed_costs() {
        let costs = ChunkCosts { recompute: vec![3.0, 1.0, 4.0, 1.0, 5.0], reconstruct: vec![2.0, 7.0, 1.0, 8.0, 2.0] };
        assert_eq!(get_recompute_units(&costs), sweep(&costs));
    }

    fn cfg(scheme: CodingScheme) -> CheckpointConfig {
        CheckpointConfig {
            scheme,
            chunk_size: 16,
            model: ModelConfig::new(2, scheme.data_shards(), 8, scheme.data_shards()).unwrap(),
            cost: CostModel::default(),
            checkpoint_decode: true,
        }
    }

    fn setup(scheme: CodingScheme, tokens: usize) -> (CheckpointConfig, ParityStore, KvState, KvGenerator) {
        let c = cfg(scheme);
        let mut store = ParityStore::unbounded();
        let generator = KvGenerator::new(11);
        let req = TraceRequest { id: 4, arrival: 0.0, input_len: tokens, output_len: 1, class: RequestClass::LongInShortOut };
        let run = run_prefill_with_checkpointing(&req, &c, &mut store, &generator, 0.0).unwrap();
        (c, store, run.kv, generator)
    }

    fn failure(n: usize, failed: &[usize]) -> FailureEvent {
        FailureEvent {
            request_id: 4,
            failed_workers: failed.iter().copied().collect(),
            at_chunk: n,
            at_time: 1.0,
            phase: Phase::Prefill,
            buffered_tokens: 0,
        }
    }

    #[test]
    fn all_double_failures_rs42() {
        for a in 0..4 {
            for b in a + 1..4 {
                let (c, store, truth, generator) = setup(CodingScheme::reed_solomon(4, 2).unwrap(), 8 * 16);
                let mut kv = truth.clone();
                kv.erase_worker(a);
                kv.erase_worker(b);
                let layout = c.model.layout(16);
                let oracle = |id: ChunkId, w: usize| generator.slice(4, id, w, layout, 16).bytes;
                let out = recover(&failure(8, &[a, b]), &c, &store, &mut kv, &oracle, 1.0).unwrap();
                assert!(kv.is_complete());
                for i in 0..8 {
                    for w in 0..4 {
                        let id = ChunkId(i);
                        assert!(verify_recovery(kv.slice(id, w).unwrap(), truth.slice(id, w).unwrap()));
                    }
                }
                assert_eq!(out.plan.reconstruct_ids.len(), 8 - out.plan.r);
            }
        }
    }

    #[test]
    fn over_tolerance_falls_back() {
        let (c, store, truth, generator) = setup(CodingScheme::reed_solomon(4, 2).unwrap(), 64);
        let mut kv = truth.clone();
        for w in 0..3 {
            kv.erase_worker(w);
        }
        let layout = c.model.layout(16);
        let oracle = |id: ChunkId, w: usize| generator.slice(4, id, w, layout, 16).bytes;
        let out = recover(&failure(4, &[0, 1, 2]), &c, &store, &mut kv, &oracle, 0.0).unwrap();
        assert_eq!(out.plan.mode, RecoveryMode::FullRecomputeFallback);
        assert_eq!(out.plan.r, 4);
        assert_eq!(out.fetched_bytes, 0);
        assert!(kv.is_complete());
    }

    #[test]
    fn corrupt_parity_falls_back_whole() {
        let (c, mut store, truth, generator) = setup(CodingScheme::reed_solomon(4, 2).unwrap(), 40 * 16);
        for i in 0..40 {
            store.corrupt(4, ChunkId(i), 0, 0, 0);
        }
        let mut kv = truth.clone();
        kv.erase_worker(1);
        let layout = c.model.layout(16);
        let oracle = |id: ChunkId, w: usize| generator.slice(4, id, w, layout, 16).bytes;
        let out = recover(&failure(40, &[1]), &c, &store, &mut kv, &oracle, 0.0).unwrap();
        assert_eq!(out.plan.mode, RecoveryMode::FullRecomputeFallback);
        assert_eq!(kv.slice(ChunkId(39), 1), truth.slice(ChunkId(39), 1));
    }

    #[test]
    fn short_request_pure_recompute() {
        // 5 tokens recompute in ~0.3 ms, under the fixed cost of a fetch
        let (c, store, truth, generator) = setup(CodingScheme::xor(4).unwrap(), 5);
        let mut kv = truth.clone();
        kv.erase_worker(2);
        let layout = c.model.layout(16);
        let oracle = |id: ChunkId, w: usize| generator.slice(4, id, w, layout, 5).bytes;
        let out = recover(&failure(1, &[2]), &c, &store, &mut kv, &oracle, 0.0).unwrap();
        assert_eq!(out.plan.mode, RecoveryMode::PureRecompute);
        assert!(out.timeline.of_kind(EventKind::FetchParity).next().is_none());
        assert_eq!(kv.slice(ChunkId(0), 2), truth.slice(ChunkId(0), 2));
    }

    #[test]
    fn xor_single_failure_and_tail_masking() {
        let (c, store, truth, _) = setup(CodingScheme::xor(4).unwrap(), 16 + 5);
        let id = ChunkId(1);
        let parity = store.get(4, id).unwrap();
        let mut surviving = truth.chunk_slices(id);
        surviving[3] = None;
        let failed: BTreeSet<usize> = [3].into();
        let out = reconstruct_chunk(id, &surviving, parity, &failed).unwrap();
        let mut expect = parity.parity[0].clone();
        for w in 0..3 {
            for (e, b) in expect.iter_mut().zip(truth.slice(id, w).unwrap()) {
                *e ^= b;
            }
        }
        assert_eq!(out[&3], expect);
        assert!(c.model.layout(16).is_masked(&out[&3], 5));
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let (_, mut store, truth, _) = setup(CodingScheme::xor(4).unwrap(), 16);
        store.corrupt(4, ChunkId(0), 0, 3, 1);
        let bad = store.iter().next().unwrap().clone();
        let failed: BTreeSet<usize> = [0].into();
        assert!(matches!(
            reconstruct_chunk(ChunkId(0), &truth.chunk_slices(ChunkId(0)), &bad, &failed),
            Err(RecoveryError::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn verify_detects_single_bit() {
        let a = vec![5u8; 32];
        let mut b = a.clone();
        assert!(verify_recovery(&a, &b));
        b[17] ^= 0x10;
        assert!(!verify_recovery(&a, &b));
    }

    #[test]
    fn timeline_shape() {
        let (c, store, truth, generator) = setup(CodingScheme::reed_solomon(4, 2).unwrap(), 30 * 16);
        let mut kv = truth.clone();
        kv.erase_worker(0);
        let layout = c.model.layout(16);
        let oracle = |id: ChunkId, w: usize| generator.slice(4, id, w, layout, 16).bytes;
        let mut f = failure(30, &[0]);
        f.buffered_tokens = 7;
        let out = recover(&f, &c, &store, &mut kv, &oracle, 10.0).unwrap();
        assert_eq!(out.plan.mode, RecoveryMode::Hybrid);
        let rec: Vec<_> = out.timeline.of_kind(EventKind::Recovery).collect();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec[0].start, 10.0);
        assert!((rec[0].end() - out.end).abs() < 1e-12);
        let costs = ChunkCosts::for_chunks(&[16; 30], 1, &c.scheme, &c.model, &c.cost);
        let expect = c.cost.restart_overhead + costs.recovery_time(out.plan.r) + c.cost.prefill_time(7);
        assert!((out.duration - expect).abs() < 1e-9);
    }
}
