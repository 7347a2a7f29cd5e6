//! Chunked KV-cache state as per-worker byte slices.
//!
//! A request of `s` tokens is cut into `ceil(s / m)` chunks. Each of the `N`
//! tensor-parallel workers holds one slice of every chunk; that slice is a
//! data shard for the erasure code. Slice layout is
//! `[K: layer-major, tokens 0..m][V: layer-major, tokens 0..m]`, each token
//! occupying `heads_per_worker * head_dim * 2` bytes of FP16 bit patterns.

use half::f16;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::CodingScheme;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("chunk size must be positive")]
    ZeroChunkSize,
    #[error("token count must be positive")]
    ZeroTokens,
    #[error("valid tokens {valid} exceed chunk size {chunk}")]
    TooManyTokens { valid: usize, chunk: usize },
    #[error("token bytes have length {got}, expected {expected}")]
    TokenBytes { got: usize, expected: usize },
}

pub const FP16_BYTES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub bytes_per_elem: usize,
    /// Tensor-parallel degree `N`.
    pub tp_degree: usize,
}

impl ModelConfig {
    pub fn new(layers: usize, kv_heads: usize, head_dim: usize, tp_degree: usize) -> Result<Self, KvError> {
        let c = ModelConfig { layers, kv_heads, head_dim, bytes_per_elem: FP16_BYTES, tp_degree };
        c.validate()?;
        Ok(c)
    }

    /// 80 layers, 8 KV heads of dimension 128, TP = 8.
    pub fn llama70b_like() -> Self {
        ModelConfig { layers: 80, kv_heads: 8, head_dim: 128, bytes_per_elem: FP16_BYTES, tp_degree: 8 }
    }

    pub fn validate(&self) -> Result<(), KvError> {
        if self.layers == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.tp_degree == 0 {
            return Err(KvError::InvalidConfig("layers, kv_heads, head_dim and tp_degree must be positive".into()));
        }
        if self.bytes_per_elem != FP16_BYTES {
            return Err(KvError::InvalidConfig(format!("bytes_per_elem must be 2 (FP16), got {}", self.bytes_per_elem)));
        }
        if (self.kv_heads * self.head_dim) % self.tp_degree != 0 {
            return Err(KvError::InvalidConfig(format!(
                "kv_heads * head_dim = {} is not divisible by tp_degree {}",
                self.kv_heads * self.head_dim,
                self.tp_degree
            )));
        }
        Ok(())
    }

    /// Bytes one worker stores for one token in one layer of K (or V).
    pub fn token_bytes(&self) -> usize {
        self.kv_heads * self.head_dim / self.tp_degree * self.bytes_per_elem
    }

    /// Bytes one worker stores per token across all layers, K and V.
    pub fn worker_bytes_per_token(&self) -> usize {
        2 * self.layers * self.token_bytes()
    }

    pub fn layout(&self, chunk_size: usize) -> SliceLayout {
        SliceLayout { blocks: 2 * self.layers, tokens: chunk_size, token_bytes: self.token_bytes() }
    }
}

/// Raw bit pattern of an IEEE-754 binary16 value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fp16Word(pub u16);

pub fn fp16_to_bits(x: f16) -> Fp16Word {
    Fp16Word(x.to_bits())
}

pub fn bits_to_fp16(w: Fp16Word) -> f16 {
    f16::from_bits(w.0)
}

/// Little-endian byte view of an FP16 tensor, ready for byte-wise coding.
pub fn fp16_slice_to_bytes(values: &[f16]) -> Vec<u8> {
    values.iter().flat_map(|v| fp16_to_bits(*v).0.to_le_bytes()).collect()
}

pub fn bytes_to_fp16_slice(bytes: &[u8]) -> Vec<f16> {
    bytes.chunks_exact(2).map(|b| bits_to_fp16(Fp16Word(u16::from_le_bytes([b[0], b[1]])))).collect()
}

/// `ceil(s / m)`.
pub fn chunk_count(s: usize, m: usize) -> Result<usize, KvError> {
    if m == 0 {
        return Err(KvError::ZeroChunkSize);
    }
    if s == 0 {
        return Err(KvError::ZeroTokens);
    }
    Ok(s.div_ceil(m))
}

/// Bytes of one worker's slice of one chunk:
/// `2 * layers * m * (kv_heads * head_dim / N) * bytes_per_elem`.
pub fn slice_bytes(config: &ModelConfig, m: usize) -> Result<usize, KvError> {
    config.validate()?;
    if m == 0 {
        return Err(KvError::ZeroChunkSize);
    }
    Ok(config.worker_bytes_per_token() * m)
}

/// Parity bytes relative to full replication (`k / n`).
pub fn memory_overhead_ratio(scheme: &CodingScheme) -> f64 {
    scheme.overhead_ratio()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId(pub u32);

impl ChunkId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Shape of a slice: `blocks` (K and V for every layer) of `tokens` rows
/// of `token_bytes` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    pub blocks: usize,
    pub tokens: usize,
    pub token_bytes: usize,
}

impl SliceLayout {
    pub fn len(&self) -> usize {
        self.blocks * self.tokens * self.token_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Byte offset of `token` within `block`.
    pub fn offset(&self, block: usize, token: usize) -> usize {
        (block * self.tokens + token) * self.token_bytes
    }

    /// Bytes of one token across all blocks.
    pub fn bytes_per_token(&self) -> usize {
        self.blocks * self.token_bytes
    }

    /// Zero every byte that belongs to tokens at or beyond `valid`.
    pub fn mask(&self, bytes: &mut [u8], valid: usize) {
        debug_assert_eq!(bytes.len(), self.len());
        if valid >= self.tokens {
            return;
        }
        for block in 0..self.blocks {
            bytes[self.offset(block, valid)..self.offset(block + 1, 0)].fill(0);
        }
    }

    /// Whether every byte past `valid` tokens is zero.
    pub fn is_masked(&self, bytes: &[u8], valid: usize) -> bool {
        valid >= self.tokens
            || (0..self.blocks).all(|b| bytes[self.offset(b, valid)..self.offset(b + 1, 0)].iter().all(|&x| x == 0))
    }
}

/// One worker's bytes for one chunk of one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvChunkSlice {
    pub request_id: u64,
    pub chunk_id: ChunkId,
    pub worker: usize,
    pub layout: SliceLayout,
    pub bytes: Vec<u8>,
    pub valid_tokens: usize,
}

impl KvChunkSlice {
    pub fn new(
        request_id: u64,
        chunk_id: ChunkId,
        worker: usize,
        layout: SliceLayout,
        bytes: Vec<u8>,
        valid_tokens: usize,
    ) -> Result<Self, KvError> {
        if valid_tokens > layout.tokens {
            return Err(KvError::TooManyTokens { valid: valid_tokens, chunk: layout.tokens });
        }
        if bytes.len() != layout.len() {
            return Err(KvError::TokenBytes { got: bytes.len(), expected: layout.len() });
        }
        Ok(KvChunkSlice { request_id, chunk_id, worker, layout, bytes, valid_tokens })
    }
}

/// Zero the positions of tokens in `[valid_tokens, m)`.
pub fn pad_partial(mut slice: KvChunkSlice, m: usize) -> Result<KvChunkSlice, KvError> {
    if slice.valid_tokens > m {
        return Err(KvError::TooManyTokens { valid: slice.valid_tokens, chunk: m });
    }
    debug_assert_eq!(m, slice.layout.tokens);
    slice.layout.mask(&mut slice.bytes, slice.valid_tokens);
    Ok(slice)
}

/// Seeded source of ground-truth KV bytes, one independent stream per
/// `(request, chunk, worker)`. Stands in for the model forward pass.
#[derive(Clone, Copy, Debug)]
pub struct KvGenerator {
    seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl KvGenerator {
    pub fn new(seed: u64) -> Self {
        KvGenerator { seed }
    }

    pub fn stream_seed(&self, request_id: u64, chunk: ChunkId, worker: usize) -> u64 {
        splitmix(splitmix(splitmix(self.seed ^ request_id) ^ chunk.0 as u64) ^ worker as u64)
    }

    /// Masked slice with `valid_tokens` random tokens.
    pub fn slice(
        &self,
        request_id: u64,
        chunk: ChunkId,
        worker: usize,
        layout: SliceLayout,
        valid_tokens: usize,
    ) -> KvChunkSlice {
        let mut rng = ChaCha8Rng::seed_from_u64(self.stream_seed(request_id, chunk, worker));
        let mut bytes = vec![0u8; layout.len()];
        rng.fill_bytes(&mut bytes);
        let valid = valid_tokens.min(layout.tokens);
        layout.mask(&mut bytes, valid);
        KvChunkSlice { request_id, chunk_id: chunk, worker, layout, bytes, valid_tokens: valid }
    }

    /// All `N` slices of one chunk.
    pub fn chunk(&self, request_id: u64, chunk: ChunkId, workers: usize, layout: SliceLayout, valid: usize) -> Vec<KvChunkSlice> {
        (0..workers).map(|w| self.slice(request_id, chunk, w, layout, valid)).collect()
    }
}

/// KV state of one request as held across the workers: `chunks[i][w]` is
/// worker `w`'s slice of chunk `i`, or `None` once erased by a failure.
#[derive(Clone, Debug, Default)]
pub struct KvState {
    pub request_id: u64,
    chunks: Vec<ChunkState>,
}

#[derive(Clone, Debug)]
struct ChunkState {
    valid_tokens: usize,
    slices: Vec<Option<Vec<u8>>>,
}

impl KvState {
    pub fn new(request_id: u64) -> Self {
        KvState { request_id, chunks: Vec::new() }
    }

    /// Append a complete chunk; slices must be in worker order.
    pub fn push_chunk(&mut self, slices: &[KvChunkSlice]) {
        debug_assert!(slices.iter().enumerate().all(|(w, s)| s.worker == w));
        debug_assert!(slices.iter().all(|s| s.chunk_id.index() == self.chunks.len()));
        let valid_tokens = slices.first().map_or(0, |s| s.valid_tokens);
        self.chunks.push(ChunkState { valid_tokens, slices: slices.iter().map(|s| Some(s.bytes.clone())).collect() });
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn valid_tokens(&self, chunk: ChunkId) -> usize {
        self.chunks[chunk.index()].valid_tokens
    }

    pub fn slice(&self, chunk: ChunkId, worker: usize) -> Option<&[u8]> {
        self.chunks.get(chunk.index())?.slices.get(worker)?.as_deref()
    }

    /// Surviving slices of one chunk, `None` where erased.
    pub fn chunk_slices(&self, chunk: ChunkId) -> Vec<Option<&[u8]>> {
        self.chunks[chunk.index()].slices.iter().map(|s| s.as_deref()).collect()
    }

    pub fn set_slice(&mut self, chunk: ChunkId, worker: usize, bytes: Vec<u8>) {
        self.chunks[chunk.index()].slices[worker] = Some(bytes);
    }

    /// Flush a worker's memory: every slice it held is lost.
    pub fn erase_worker(&mut self, worker: usize) {
        for c in &mut self.chunks {
            if let Some(s) = c.slices.get_mut(worker) {
                *s = None;
            }
        }
    }

    pub fn is_complete(&self) -> bool {
        self.chunks.iter().all(|c| c.slices.iter().all(Option::is_some))
    }

    /// Total bytes currently resident across all workers.
    pub fn resident_bytes(&self) -> usize {
        self.chunks.iter().flat_map(|c| c.slices.iter().flatten()).map(Vec::len).sum()
    }
}

/// Builds chunk-sized slices from decode tokens arriving one at a time.
#[derive(Clone, Debug)]
pub struct TokenBuffer {
    layout: SliceLayout,
    workers: Vec<Vec<u8>>,
    tokens: usize,
}

impl TokenBuffer {
    pub fn new(layout: SliceLayout, workers: usize) -> Self {
        TokenBuffer { layout, workers: vec![vec![0u8; layout.len()]; workers], tokens: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn is_full(&self) -> bool {
        self.tokens == self.layout.tokens
    }

    /// Add one token; `per_worker[w]` holds worker `w`'s bytes for that
    /// token, block by block (`layout.bytes_per_token()` bytes).
    pub fn push<B: AsRef<[u8]>>(&mut self, per_worker: &[B]) -> Result<(), KvError> {
        if self.is_full() {
            return Err(KvError::TooManyTokens { valid: self.tokens + 1, chunk: self.layout.tokens });
        }
        let tb = self.layout.token_bytes;
        for (buf, token) in self.workers.iter_mut().zip(per_worker) {
            let token = token.as_ref();
            if token.len() != self.layout.bytes_per_token() {
                return Err(KvError::TokenBytes { got: token.len(), expected: self.layout.bytes_per_token() });
            }
            for block in 0..self.layout.blocks {
                let dst = self.layout.offset(block, self.tokens);
                buf[dst..dst + tb].copy_from_slice(&token[block * tb..(block + 1) * tb]);
            }
        }
        self.tokens += 1;
        Ok(())
    }

    /// Hand out the buffered chunk and reset.
    pub fn take(&mut self, request_id: u64, chunk: ChunkId) -> Vec<KvChunkSlice> {
        let valid = self.tokens;
        self.tokens = 0;
        let layout = self.layout;
        self.workers
            .iter_mut()
            .enumerate()
            .map(|(w, buf)| {
                let bytes = std::mem::replace(buf, vec![0u8; layout.len()]);
                KvChunkSlice { request_id, chunk_id: chunk, worker: w, layout, bytes, valid_tokens: valid }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp16_examples() {
        assert_eq!(fp16_to_bits(f16::from_f32(1.0)), Fp16Word(0x3C00));
        assert_eq!(fp16_to_bits(f16::from_f32(-0.0)), Fp16Word(0x8000));
        assert_eq!(fp16_to_bits(f16::INFINITY), Fp16Word(0x7C00));
    }

    #[test]
    fn fp16_bijection_exhaustive() {
        for bits in 0..=u16::MAX {
            let v = bits_to_fp16(Fp16Word(bits));
            assert_eq!(fp16_to_bits(v).0, bits);
        }
        let vals: Vec<f16> = (0..=u16::MAX).map(f16::from_bits).collect();
        let back = bytes_to_fp16_slice(&fp16_slice_to_bytes(&vals));
        assert!(vals.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_count(4096, 2048), Ok(2));
        assert_eq!(chunk_count(5000, 2048), Ok(3));
        assert_eq!(chunk_count(1, 2048), Ok(1));
        assert_eq!(chunk_count(10, 0), Err(KvError::ZeroChunkSize));
    }

    #[test]
    fn slice_sizes() {
        let small = ModelConfig::new(2, 4, 8, 2).unwrap();
        assert_eq!(slice_bytes(&small, 16), Ok(2048));
        let tp1 = ModelConfig::new(2, 4, 8, 1).unwrap();
        assert_eq!(slice_bytes(&tp1, 16), Ok(4096));
        assert_eq!(slice_bytes(&ModelConfig::llama70b_like(), 2048), Ok(83_886_080));
        assert!(ModelConfig::new(2, 3, 3, 2).is_err());
        let bad = ModelConfig { layers: 2, kv_heads: 3, head_dim: 3, bytes_per_elem: 2, tp_degree: 2 };
        assert!(slice_bytes(&bad, 16).is_err());
    }

    #[test]
    fn overhead_ratios() {
        assert_eq!(memory_overhead_ratio(&CodingScheme::reed_solomon(8, 2).unwrap()), 0.25);
        assert_eq!(memory_overhead_ratio(&CodingScheme::xor(2).unwrap()), 0.5);
        assert_eq!(memory_overhead_ratio(&CodingScheme::reed_solomon(4, 4).unwrap()), 1.0);
    }

    #[test]
    fn padding() {
        let cfg = ModelConfig::new(2, 4, 8, 2).unwrap();
        let layout = cfg.layout(16);
        let gen = KvGenerator::new(1);
        let full = gen.slice(0, ChunkId(0), 0, layout, 16);
        assert_eq!(pad_partial(full.clone(), 16).unwrap(), full);

        let mut empty = full.clone();
        empty.valid_tokens = 0;
        let empty = pad_partial(empty, 16).unwrap();
        assert!(empty.bytes.iter().all(|&b| b == 0));

        let mut part = full.clone();
        part.valid_tokens = 5;
        let part = pad_partial(part, 16).unwrap();
        assert!(layout.is_masked(&part.bytes, 5));
        // active bytes untouched
        for block in 0..layout.blocks {
            let r = layout.offset(block, 0)..layout.offset(block, 5);
            assert_eq!(part.bytes[r.clone()], full.bytes[r]);
        }
    }

    #[test]
    fn generator_is_deterministic_and_distinct() {
        let layout = ModelConfig::new(2, 4, 8, 2).unwrap().layout(16);
        let g = KvGenerator::new(42);
        assert_eq!(g.slice(1, ChunkId(2), 0, layout, 16), g.slice(1, ChunkId(2), 0, layout, 16));
        assert_ne!(g.slice(1, ChunkId(2), 0, layout, 16).bytes, g.slice(1, ChunkId(2), 1, layout, 16).bytes);
        assert_ne!(g.slice(1, ChunkId(2), 0, layout, 16).bytes, g.slice(1, ChunkId(3), 0, layout, 16).bytes);
        assert!(layout.is_masked(&g.slice(1, ChunkId(2), 0, layout, 3).bytes, 3));
    }

    #[test]
    fn token_buffer_matches_layout() {
        let layout = ModelConfig::new(1, 2, 2, 1).unwrap().layout(4);
        let mut buf = TokenBuffer::new(layout, 2);
        for t in 0..3u8 {
            let w0 = vec![t; layout.bytes_per_token()];
            let w1 = vec![t + 100; layout.bytes_per_token()];
            buf.push(&[w0, w1]).unwrap();
        }
        let slices = buf.take(9, ChunkId(1));
        assert_eq!(slices[0].valid_tokens, 3);
        assert!(layout.is_masked(&slices[0].bytes, 3));
        for block in 0..layout.blocks {
            for t in 0..3 {
                let off = layout.offset(block, t);
                assert!(slices[1].bytes[off..off + layout.token_bytes].iter().all(|&b| b == t as u8 + 100));
            }
        }
        assert!(buf.is_empty());
    }

    #[test]
    fn kv_state_erase() {
        let layout = ModelConfig::new(1, 2, 2, 2).unwrap().layout(4);
        let g = KvGenerator::new(3);
        let mut st = KvState::new(0);
        st.push_chunk(&g.chunk(0, ChunkId(0), 2, layout, 4));
        st.push_chunk(&g.chunk(0, ChunkId(1), 2, layout, 2));
        assert!(st.is_complete());
        st.erase_worker(1);
        assert!(!st.is_complete());
        assert!(st.slice(ChunkId(1), 1).is_none());
        assert!(st.slice(ChunkId(1), 0).is_some());
        assert_eq!(st.valid_tokens(ChunkId(1)), 2);
    }
}
