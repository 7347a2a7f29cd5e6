//! Analytic cost model for compute, interconnect and host-tier transfers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::CodingScheme;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid cost model: {0}")]
pub struct CostError(pub String);

/// Per-operation rates. Times are seconds, bandwidths bytes per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Prefill compute time per token (all workers in parallel).
    pub compute_per_token: f64,
    /// Time of one decode step for a request.
    pub decode_per_token: f64,
    /// Worker-to-worker fabric bandwidth.
    pub intra_bw: f64,
    /// Host link bandwidth, shared by all workers.
    pub host_bw: f64,
    /// Disk bandwidth for disk-backed replication.
    pub disk_bw: f64,
    pub encode_rate: f64,
    pub reconstruct_rate: f64,
    /// Fixed cost of one collective (gather).
    pub collective_latency: f64,
    /// Fixed cost of one host or disk transfer.
    pub transfer_latency: f64,
    /// Connection re-establishment and warmup after a failure.
    pub restart_overhead: f64,
}

impl Default for CostModel {
    /// Calibrated for a 70B-class model at TP = 8 with 2048-token chunks:
    /// one chunk of prefill takes 120 ms.
    fn default() -> Self {
        CostModel {
            compute_per_token: 0.120 / 2048.0,
            decode_per_token: 0.025,
            intra_bw: 400e9,
            host_bw: 32e9,
            disk_bw: 6e9,
            encode_rate: 200e9,
            reconstruct_rate: 200e9,
            collective_latency: 500e-6,
            transfer_latency: 50e-6,
            restart_overhead: 2.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        let rates = [
            ("compute_per_token", self.compute_per_token),
            ("decode_per_token", self.decode_per_token),
            ("intra_bw", self.intra_bw),
            ("host_bw", self.host_bw),
            ("disk_bw", self.disk_bw),
            ("encode_rate", self.encode_rate),
            ("reconstruct_rate", self.reconstruct_rate),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [
            ("collective_latency", self.collective_latency),
            ("transfer_latency", self.transfer_latency),
            ("restart_overhead", self.restart_overhead),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if self.host_bw > self.intra_bw {
            return Err(CostError(format!("host_bw {} exceeds intra_bw {}", self.host_bw, self.intra_bw)));
        }
        Ok(())
    }

    pub fn prefill_time(&self, tokens: usize) -> f64 {
        tokens as f64 * self.compute_per_token
    }

    pub fn decode_time(&self, tokens: usize) -> f64 {
        tokens as f64 * self.decode_per_token
    }

    /// Many-to-one gather of `senders` slices onto one worker.
    pub fn gather_time(&self, senders: usize, slice_bytes: usize) -> f64 {
        senders as f64 * slice_bytes as f64 / self.intra_bw + self.collective_latency
    }

    /// Encoding `n` data slices.
    pub fn encode_time(&self, n: usize, slice_bytes: usize) -> f64 {
        n as f64 * slice_bytes as f64 / self.encode_rate
    }

    pub fn reconstruct_time(&self, n: usize, slice_bytes: usize) -> f64 {
        n as f64 * slice_bytes as f64 / self.reconstruct_rate
    }

    pub fn host_transfer_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.host_bw + self.transfer_latency
    }

    pub fn disk_transfer_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.disk_bw + self.transfer_latency
    }

    /// Non-overlapped part of one chunk checkpoint: gather to the parity
    /// worker, then encode.
    pub fn checkpoint_stall(&self, scheme: &CodingScheme, slice_bytes: usize) -> f64 {
        let n = scheme.data_shards();
        self.gather_time(n - 1, slice_bytes) + self.encode_time(n, slice_bytes)
    }

    /// Asynchronous parity offload to the host tier.
    pub fn parity_offload(&self, scheme: &CodingScheme, slice_bytes: usize) -> f64 {
        self.host_transfer_time(scheme.parity_shards() * slice_bytes)
    }
}
