//! Erasure-coded checkpointing of streaming KV-cache state.
//!
//! The crate is organised bottom-up:
//!
//! - [`coding`]: GF(2^8) arithmetic and the XOR, RDP and Reed-Solomon codecs.
//! - [`kv`]: chunked KV slices, FP16 bit reinterpretation, masking and the
//!   host-tier [`store::ParityStore`].
//! - [`checkpoint`]: per-chunk gather, encode and asynchronous offload with
//!   round-robin parity-worker assignment.
//! - [`recovery`]: the hybrid recompute/reconstruct split and bit-exact
//!   restoration of failed workers.
//! - [`sim`]: a deterministic discrete-event cluster simulator with trace
//!   synthesis, failure injection and metrics.

pub mod checkpoint;
pub mod coding;
pub mod cost;
pub mod kv;
pub mod recovery;
pub mod sim;
pub mod store;
pub mod timeline;
