//! Run metrics computed from a timeline.

use serde::{Deserialize, Serialize};

use crate::timeline::{Event, EventClass, EventKind, Lane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Arrival to end of prefill, per request.
    pub prefill_latency: Vec<f64>,
    /// End of prefill to last token, per request.
    pub decode_latency: Vec<f64>,
    /// Total recovery time per request (0 when it did not fail).
    pub recovery_latency: Vec<f64>,
    /// Nearest-rank percentiles of end-to-end latency.
    pub p50: f64,
    pub p99: f64,
    pub eitr: f64,
    pub mttr: f64,
    pub io_bytes_checkpoint: u64,
    pub io_bytes_recovery: u64,
    pub parity_store_peak_bytes: u64,
}

/// Inference busy time over total runtime. Runtime is the time the group
/// is busy, so idle gaps between arrivals count for neither side.
pub fn compute_eitr(events: &[Event]) -> f64 {
    let mut inference = 0.0;
    let mut overhead = 0.0;
    for e in events.iter().filter(|e| e.lane == Lane::Cluster) {
        match e.kind.class() {
            EventClass::Inference => inference += e.duration,
            EventClass::Overhead => overhead += e.duration,
            EventClass::Detail => {}
        }
    }
    let total = inference + overhead;
    if total > 0.0 {
        inference / total
    } else {
        1.0
    }
}

/// Mean duration of the recovery episodes in `events`; 0 without failures.
pub fn compute_mttr(events: &[Event]) -> f64 {
    let durations: Vec<f64> = events.iter().filter(|e| e.kind == EventKind::Recovery).map(|e| e.duration).collect();
    if durations.is_empty() {
        0.0
    } else {
        durations.iter().sum::<f64>() / durations.len() as f64
    }
}

/// Nearest-rank percentile: the smallest value with at least `p` percent
/// of the samples at or below it.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(kind: EventKind, start: f64, d: f64) -> Event {
        Event::new(kind, Lane::Cluster, start, d)
    }

    #[test]
    fn eitr_examples() {
        assert_eq!(compute_eitr(&[span(EventKind::Prefill, 0.0, 3.0), span(EventKind::Decode, 3.0, 1.0)]), 1.0);
        assert_eq!(compute_eitr(&[span(EventKind::Decode, 0.0, 90.0), span(EventKind::Recovery, 90.0, 10.0)]), 0.9);
        assert_eq!(compute_eitr(&[]), 1.0);
    }

    #[test]
    fn detail_and_worker_lanes_ignored() {
        let evs = [
            span(EventKind::Prefill, 0.0, 4.0),
            span(EventKind::Restart, 4.0, 1.0),
            Event::new(EventKind::CheckpointStall, Lane::Worker(0), 0.0, 5.0),
            span(EventKind::CheckpointStall, 4.0, 1.0),
        ];
        assert_eq!(compute_eitr(&evs), 0.8);
    }

    #[test]
    fn mttr_examples() {
        assert_eq!(compute_mttr(&[span(EventKind::Recovery, 0.0, 2.0), span(EventKind::Recovery, 5.0, 4.0)]), 3.0);
        assert_eq!(compute_mttr(&[span(EventKind::Prefill, 0.0, 2.0)]), 0.0);
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 99.0), 10.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
