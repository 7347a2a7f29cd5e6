use std::collections::BTreeMap;

use ghostserve::checkpoint::{AssignmentState, CheckpointConfig};
use ghostserve::coding::{encode, reconstruct, CodingScheme, ErasurePattern, SchemeKind};
use ghostserve::cost::CostModel;
use ghostserve::kv::{ChunkId, KvGenerator, ModelConfig};
use ghostserve::recovery::{get_recompute_units, ChunkCosts};
use ghostserve::sim::{inject_failures, simulate, FailureInjectorConfig, RequestClass, SimConfig, Strategy as ServeStrategy, TraceRequest};
use ghostserve::store::{ParityChunk, ParityStore};
use ghostserve::timeline::{EventKind, Lane};
use proptest::prelude::*;

fn scheme_strategy() -> impl Strategy<Value = CodingScheme> {
    prop_oneof![
        (1usize..10).prop_map(|n| CodingScheme::xor(n).unwrap()),
        (2usize..10).prop_map(|n| CodingScheme::new(SchemeKind::Rdp, n, 2).unwrap()),
        (1usize..10, 1usize..5).prop_map(|(n, k)| CodingScheme::reed_solomon(n, k.min(n)).unwrap()),
    ]
}

/// Every r in [0, n], smallest r among equal maxima.
fn sweep(costs: &ChunkCosts) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for r in 0..=costs.len() {
        let recompute: f64 = costs.recompute[..r].iter().sum();
        let reconstruct: f64 = costs.reconstruct[r..].iter().sum();
        let t = recompute.max(reconstruct);
        if t < best.1 {
            best = (r, t);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn erasures_within_tolerance_round_trip(
        scheme in scheme_strategy(),
        len in 0usize..300,
        seed in any::<u64>(),
        pick in any::<u64>(),
    ) {
        let n = scheme.data_shards();
        let data: Vec<Vec<u8>> = (0..n)
            .map(|i| (0..len).map(|j| (seed.wrapping_mul(31 + i as u64).wrapping_add(j as u64 * 2654435761) >> 13) as u8).collect())
            .collect();
        let parity = encode(&scheme, &data).unwrap();
        let total = scheme.total_shards();
        let mut lost = Vec::new();
        let mut p = pick;
        for i in 0..total {
            if lost.len() < scheme.max_tolerance() && p & 1 == 1 {
                lost.push(i);
            }
            p >>= 1;
        }
        let all: Vec<&Vec<u8>> = data.iter().chain(&parity).collect();
        let available: BTreeMap<usize, &[u8]> = (0..total).filter(|i| !lost.contains(i)).map(|i| (i, all[i].as_slice())).collect();
        let out = reconstruct(&scheme, &available, &ErasurePattern::new(lost.iter().copied())).unwrap();
        for i in lost {
            prop_assert_eq!(&out[&i], all[i]);
        }
    }

    #[test]
    fn round_robin_counts_differ_by_at_most_one(chunks in 0usize..5000, workers in 1usize..64) {
        let mut state = AssignmentState::new();
        let mut counts = vec![0usize; workers];
        for _ in 0..chunks {
            counts[state.advance(workers)] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn recompute_split_matches_sweep(
        recompute in prop::collection::vec(0.0f64..1.0, 0..40),
        reconstruct_scale in 0.0f64..3.0,
        tail in 0.0f64..1.0,
    ) {
        let n = recompute.len();
        let mut reconstruct: Vec<f64> = recompute.iter().map(|c| c * reconstruct_scale + 0.01).collect();
        if let Some(last) = reconstruct.last_mut() {
            *last *= tail;
        }
        let costs = ChunkCosts { recompute, reconstruct };
        let r = get_recompute_units(&costs);
        let (best_r, best) = sweep(&costs);
        prop_assert!(r <= n);
        prop_assert!((costs.recovery_time(r) - best).abs() <= 1e-12 * best.max(1.0));
        if (costs.recovery_time(r) - best).abs() == 0.0 {
            prop_assert!(r <= best_r || costs.recovery_time(best_r) == costs.recovery_time(r));
        }
        let pure = costs.recovery_time(0).min(costs.recovery_time(n));
        prop_assert!(costs.recovery_time(r) <= pure + 1e-12);
    }

    #[test]
    fn parity_store_file_round_trip(
        scheme in scheme_strategy(),
        entries in prop::collection::vec((0u64..5, 0u32..8, 0usize..40), 0..6),
    ) {
        let mut store = ParityStore::unbounded();
        for (req, chunk, len) in entries {
            let parity = (0..scheme.parity_shards()).map(|j| vec![(req as u8) ^ (j as u8); len]).collect();
            let _ = store.put(ParityChunk::new(req, ChunkId(chunk), scheme, parity, len.min(3)));
        }
        let mut bytes = Vec::new();
        store.save(&scheme, &mut bytes).unwrap();
        let (loaded_scheme, loaded) = ParityStore::load(bytes.as_slice(), usize::MAX).unwrap();
        prop_assert_eq!(loaded_scheme, scheme);
        let a: Vec<_> = store.iter().cloned().collect();
        let b: Vec<_> = loaded.iter().cloned().collect();
        prop_assert_eq!(a, b);
    }
}

fn sim_config(scheme: CodingScheme) -> SimConfig {
    let tp = scheme.data_shards();
    SimConfig::new(CheckpointConfig {
        scheme,
        chunk_size: 128,
        model: ModelConfig::new(8, tp, 32, tp).unwrap(),
        cost: CostModel::default(),
        checkpoint_decode: true,
    })
}

fn trace(count: u64) -> Vec<TraceRequest> {
    (0..count)
        .map(|id| TraceRequest {
            id,
            arrival: id as f64 * 0.2,
            input_len: 100 + (id as usize * 377) % 1500,
            output_len: 1 + (id as usize * 91) % 400,
            class: RequestClass::LongInShortOut,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_invariants(seed in any::<u64>(), workers_per_failure in 1usize..4, strat in 0usize..4) {
        let rs = CodingScheme::reed_solomon(4, 2).unwrap();
        let cfg = sim_config(rs);
        let t = trace(12);
        let strategy = [ServeStrategy::Ghostserve { scheme: rs }, ServeStrategy::ReplicateHost, ServeStrategy::ReplicateDisk, ServeStrategy::RecomputeOnly][strat];
        let failures = inject_failures(&t, 4, &FailureInjectorConfig { rate: 0.5, seed, workers_per_failure }).unwrap();
        let out = simulate(&t, strategy, &cfg, &failures).unwrap();
        let again = simulate(&t, strategy, &cfg, &failures).unwrap();
        prop_assert_eq!(&out.report, &again.report);

        // every requested output token is decoded exactly once
        let decoded: f64 = out.timeline.of_kind(EventKind::Decode).map(|e| e.duration).sum();
        let expected: usize = t.iter().map(|r| r.output_len).sum();
        prop_assert!((decoded - expected as f64 * cfg.checkpoint.cost.decode_per_token).abs() < 1e-6);

        prop_assert!(out.report.eitr > 0.0 && out.report.eitr <= 1.0);
        prop_assert!(out.report.p50 <= out.report.p99);
        prop_assert_eq!(out.recoveries.len(), failures.len());

        // non-overlapping cluster spans in start order
        let mut spans: Vec<_> = out.timeline.events().iter()
            .filter(|e| e.lane == Lane::Cluster && e.kind.class() != ghostserve::timeline::EventClass::Detail)
            .collect();
        spans.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in spans.windows(2) {
            prop_assert!(w[1].start >= w[0].end() - 1e-9, "{:?} overlaps {:?}", w[0], w[1]);
        }
        prop_assert!(ghostserve::timeline::find_worker_overlap(out.timeline.events()).is_none());
    }
}

#[test]
fn peak_parity_is_k_over_n_of_replica_peak() {
    for scheme in [CodingScheme::reed_solomon(4, 1).unwrap(), CodingScheme::reed_solomon(4, 2).unwrap(), CodingScheme::xor(4).unwrap()] {
        let cfg = sim_config(scheme);
        let t = trace(10);
        let g = simulate(&t, ServeStrategy::Ghostserve { scheme }, &cfg, &[]).unwrap().report;
        let h = simulate(&t, ServeStrategy::ReplicateHost, &cfg, &[]).unwrap().report;
        assert_eq!(g.parity_store_peak_bytes * 4, h.parity_store_peak_bytes * scheme.parity_shards() as u64);
        assert_eq!(g.io_bytes_checkpoint * 4, h.io_bytes_checkpoint * scheme.parity_shards() as u64);
    }
}

#[test]
fn ghostserve_mttr_beats_baselines_on_long_inputs() {
    let rs = CodingScheme::reed_solomon(8, 2).unwrap();
    let cfg = SimConfig::new(CheckpointConfig {
        scheme: rs,
        chunk_size: 2048,
        model: ModelConfig::llama70b_like(),
        cost: CostModel::default(),
        checkpoint_decode: true,
    });
    let t: Vec<TraceRequest> = (0..20)
        .map(|id| TraceRequest {
            id,
            arrival: 0.0,
            input_len: 16_384 + id as usize * 2_500,
            output_len: 64,
            class: RequestClass::LongInShortOut,
        })
        .collect();
    let failures = inject_failures(&t, 8, &FailureInjectorConfig { rate: 1.0, seed: 5, workers_per_failure: 1 }).unwrap();
    let mttr = |s| simulate(&t, s, &cfg, &failures).unwrap().report.mttr;
    let g = mttr(ServeStrategy::Ghostserve { scheme: rs });
    assert!(g <= mttr(ServeStrategy::ReplicateHost));
    assert!(g <= mttr(ServeStrategy::RecomputeOnly));
}

#[test]
fn recovered_state_matches_ground_truth_for_rs82_full_request() {
    use ghostserve::checkpoint::run_prefill_with_checkpointing;
    use ghostserve::recovery::{recover, FailureEvent, Phase};
    let rs = CodingScheme::reed_solomon(8, 2).unwrap();
    let cfg = CheckpointConfig {
        scheme: rs,
        chunk_size: 2048,
        model: SimConfig::small_data_model(8),
        cost: CostModel::default(),
        checkpoint_decode: false,
    };
    let generator = KvGenerator::new(77);
    let req = TraceRequest { id: 9, arrival: 0.0, input_len: 65_536, output_len: 1, class: RequestClass::LongInShortOut };
    let mut store = ParityStore::unbounded();
    let run = run_prefill_with_checkpointing(&req, &cfg, &mut store, &generator, 0.0).unwrap();
    let truth = run.kv.clone();
    let mut kv = run.kv;
    kv.erase_worker(5);
    let layout = cfg.model.layout(2048);
    let oracle = |c: ChunkId, w: usize| generator.slice(9, c, w, layout, 2048).bytes;
    let failure = FailureEvent {
        request_id: 9,
        failed_workers: [5].into(),
        at_chunk: 32,
        at_time: run.prefill_end,
        phase: Phase::Prefill,
        buffered_tokens: 0,
    };
    recover(&failure, &cfg, &store, &mut kv, &oracle, run.prefill_end).unwrap();
    for c in 0..32 {
        for w in 0..8 {
            assert_eq!(kv.slice(ChunkId(c), w), truth.slice(ChunkId(c), w));
        }
    }
}
