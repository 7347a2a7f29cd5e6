//! Host-tier store of parity chunks.
//!
//! Accounting: `used_bytes` is the sum of stored parity buffer lengths plus
//! [`ENTRY_METADATA_BYTES`] per entry and never exceeds `capacity_bytes`.
//! A put that would overflow is refused with [`StoreError::CapacityExceeded`]
//! so the caller can stall; nothing is ever evicted implicitly.
//!
//! On-disk format (all integers little-endian):
//!
//! ```text
//! "GSRV" | version u16 | scheme kind u8 | n u8 | k u8
//! repeated: entry_len u64 | request_id u64 | chunk_id u32 | valid_tokens u32
//!           | slice_len u64 | k * slice_len parity bytes | checksum u64
//! ```

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::{self, Read, Write};

use fnv::FnvHasher;
use thiserror::Error;

use crate::coding::{CodingScheme, SchemeKind};
use crate::kv::ChunkId;

pub const MAGIC: &[u8; 4] = b"GSRV";
pub const FORMAT_VERSION: u16 = 1;
/// Fixed bookkeeping charged per entry (ids, lengths, checksum).
pub const ENTRY_METADATA_BYTES: usize = 32;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("host tier full: entry needs {needed} bytes, {available} available")]
    CapacityExceeded { needed: usize, available: usize },
    #[error("no parity for request {request_id} chunk {chunk_id}")]
    Missing { request_id: u64, chunk_id: ChunkId },
    #[error("parity checksum mismatch for request {request_id} chunk {chunk_id}")]
    ChecksumMismatch { request_id: u64, chunk_id: ChunkId },
    #[error("entry scheme {got} does not match store scheme {expected}")]
    SchemeMismatch { expected: CodingScheme, got: CodingScheme },
    #[error("malformed parity file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 64-bit FNV-1a over the concatenated buffers.
pub fn checksum<B: AsRef<[u8]>>(buffers: &[B]) -> u64 {
    let mut h = FnvHasher::default();
    for b in buffers {
        h.write(b.as_ref());
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityChunk {
    pub request_id: u64,
    pub chunk_id: ChunkId,
    pub scheme: CodingScheme,
    pub parity: Vec<Vec<u8>>,
    pub valid_tokens: usize,
    pub checksum: u64,
}

impl ParityChunk {
    pub fn new(request_id: u64, chunk_id: ChunkId, scheme: CodingScheme, parity: Vec<Vec<u8>>, valid_tokens: usize) -> Self {
        let checksum = checksum(&parity);
        ParityChunk { request_id, chunk_id, scheme, parity, valid_tokens, checksum }
    }

    pub fn slice_len(&self) -> usize {
        self.parity.first().map_or(0, Vec::len)
    }

    pub fn payload_bytes(&self) -> usize {
        self.parity.iter().map(Vec::len).sum()
    }

    pub fn stored_bytes(&self) -> usize {
        self.payload_bytes() + ENTRY_METADATA_BYTES
    }

    pub fn verify(&self) -> bool {
        checksum(&self.parity) == self.checksum
    }
}

type Key = (u64, ChunkId);

#[derive(Clone, Debug)]
pub struct ParityStore {
    entries: BTreeMap<Key, ParityChunk>,
    used_bytes: usize,
    capacity_bytes: usize,
    peak_bytes: usize,
}

impl ParityStore {
    pub fn new(capacity_bytes: usize) -> Self {
        ParityStore { entries: BTreeMap::new(), used_bytes: 0, capacity_bytes, peak_bytes: 0 }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether an entry of `bytes` stored bytes would fit right now.
    pub fn has_room_for(&self, bytes: usize) -> bool {
        self.used_bytes.saturating_add(bytes) <= self.capacity_bytes
    }

    /// Insert or replace one entry. Either the whole entry is stored and
    /// accounted, or nothing changes.
    pub fn put(&mut self, chunk: ParityChunk) -> Result<(), StoreError> {
        let key = (chunk.request_id, chunk.chunk_id);
        let freed = self.entries.get(&key).map_or(0, ParityChunk::stored_bytes);
        let needed = chunk.stored_bytes();
        let after = self.used_bytes - freed + needed;
        if after > self.capacity_bytes {
            return Err(StoreError::CapacityExceeded {
                needed,
                available: self.capacity_bytes - (self.used_bytes - freed),
            });
        }
        self.entries.insert(key, chunk);
        self.used_bytes = after;
        self.peak_bytes = self.peak_bytes.max(after);
        Ok(())
    }

    /// Fetch an entry after verifying its checksum.
    pub fn get(&self, request_id: u64, chunk_id: ChunkId) -> Result<&ParityChunk, StoreError> {
        let entry = self.entries.get(&(request_id, chunk_id)).ok_or(StoreError::Missing { request_id, chunk_id })?;
        if !entry.verify() {
            return Err(StoreError::ChecksumMismatch { request_id, chunk_id });
        }
        Ok(entry)
    }

    pub fn contains(&self, request_id: u64, chunk_id: ChunkId) -> bool {
        self.entries.contains_key(&(request_id, chunk_id))
    }

    pub fn remove(&mut self, request_id: u64, chunk_id: ChunkId) -> Option<ParityChunk> {
        let entry = self.entries.remove(&(request_id, chunk_id))?;
        self.used_bytes -= entry.stored_bytes();
        Some(entry)
    }

    /// Drop every entry of a finished request; returns bytes freed.
    pub fn evict_request(&mut self, request_id: u64) -> usize {
        let keys: Vec<Key> = self.entries.range((request_id, ChunkId(0))..=(request_id, ChunkId(u32::MAX))).map(|(k, _)| *k).collect();
        keys.into_iter().filter_map(|(r, c)| self.remove(r, c)).map(|e| e.stored_bytes()).sum()
    }

    pub fn chunks_of(&self, request_id: u64) -> impl Iterator<Item = &ParityChunk> {
        self.entries.range((request_id, ChunkId(0))..=(request_id, ChunkId(u32::MAX))).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParityChunk> {
        self.entries.values()
    }

    /// Recompute `used_bytes` from the entries.
    pub fn audit(&self) -> usize {
        self.entries.values().map(ParityChunk::stored_bytes).sum()
    }

    /// Flip one bit of a stored parity buffer without updating its checksum.
    /// Used to inject silent corruption.
    pub fn corrupt(&mut self, request_id: u64, chunk_id: ChunkId, shard: usize, byte: usize, bit: u8) -> bool {
        match self.entries.get_mut(&(request_id, chunk_id)).and_then(|e| e.parity.get_mut(shard)).and_then(|p| p.get_mut(byte)) {
            Some(b) => {
                *b ^= 1 << (bit % 8);
                true
            }
            None => false,
        }
    }

    /// Serialise all entries. Every entry must use `scheme`.
    pub fn save<W: Write>(&self, scheme: &CodingScheme, mut w: W) -> Result<(), StoreError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[scheme.kind().tag(), scheme.data_shards() as u8, scheme.parity_shards() as u8])?;
        for e in self.entries.values() {
            if e.scheme != *scheme {
                return Err(StoreError::SchemeMismatch { expected: *scheme, got: e.scheme });
            }
            let slice_len = e.slice_len();
            let body_len = 8 + 4 + 4 + 8 + scheme.parity_shards() * slice_len + 8;
            w.write_all(&(body_len as u64).to_le_bytes())?;
            w.write_all(&e.request_id.to_le_bytes())?;
            w.write_all(&e.chunk_id.0.to_le_bytes())?;
            w.write_all(&(e.valid_tokens as u32).to_le_bytes())?;
            w.write_all(&(slice_len as u64).to_le_bytes())?;
            for p in &e.parity {
                w.write_all(p)?;
            }
            w.write_all(&e.checksum.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a store written by [`ParityStore::save`]. Checksums are kept as
    /// stored, so corruption surfaces on `get`.
    pub fn load<R: Read>(mut r: R, capacity_bytes: usize) -> Result<(CodingScheme, ParityStore), StoreError> {
        let mut header = [0u8; 9];
        r.read_exact(&mut header).map_err(|_| StoreError::Format("truncated header".into()))?;
        if &header[..4] != MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        let kind = SchemeKind::from_tag(header[6]).ok_or_else(|| StoreError::Format(format!("unknown scheme tag {}", header[6])))?;
        let scheme = CodingScheme::new(kind, header[7] as usize, header[8] as usize)
            .map_err(|e| StoreError::Format(e.to_string()))?;

        let mut store = ParityStore::new(capacity_bytes);
        loop {
            let mut len_buf = [0u8; 8];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let body_len = u64::from_le_bytes(len_buf) as usize;
            if body_len < 32 {
                return Err(StoreError::Format(format!("entry length {body_len} too short")));
            }
            let mut body = vec![0u8; body_len];
            r.read_exact(&mut body).map_err(|_| StoreError::Format("truncated entry".into()))?;
            let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
            let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
            let request_id = u64_at(0);
            let chunk_id = ChunkId(u32_at(8));
            let valid_tokens = u32_at(12) as usize;
            let slice_len = u64_at(16) as usize;
            let k = scheme.parity_shards();
            if body_len != 24 + k * slice_len + 8 {
                return Err(StoreError::Format(format!("entry length {body_len} inconsistent with slice length {slice_len}")));
            }
            let parity = (0..k).map(|i| body[24 + i * slice_len..24 + (i + 1) * slice_len].to_vec()).collect();
            let checksum = u64_at(24 + k * slice_len);
            store.put(ParityChunk { request_id, chunk_id, scheme, parity, valid_tokens, checksum })?;
        }
        Ok((scheme, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(req: u64, chunk: u32, len: usize) -> ParityChunk {
        let scheme = CodingScheme::reed_solomon(4, 2).unwrap();
        let parity = (0..2).map(|i| (0..len).map(|b| (b as u8).wrapping_mul(7) ^ i as u8 ^ chunk as u8).collect()).collect();
        ParityChunk::new(req, ChunkId(chunk), scheme, parity, 3)
    }

    #[test]
    fn fnv1a_reference_values() {
        // standard FNV-1a 64 test vectors
        assert_eq!(checksum::<&[u8]>(&[b""]), 0xcbf29ce484222325);
        assert_eq!(checksum(&[b"a"]), 0xaf63dc4c8601ec8c);
        assert_eq!(checksum(&[b"foobar"]), 0x85944171f73967e8);
        assert_eq!(checksum(&[&b"foo"[..], &b"bar"[..]]), 0x85944171f73967e8);
    }

    #[test]
    fn put_get_round_trip() {
        let mut s = ParityStore::unbounded();
        let e = entry(1, 0, 64);
        s.put(e.clone()).unwrap();
        assert_eq!(s.get(1, ChunkId(0)).unwrap(), &e);
        assert!(matches!(s.get(1, ChunkId(1)), Err(StoreError::Missing { .. })));
        assert!(matches!(s.get(2, ChunkId(0)), Err(StoreError::Missing { .. })));
    }

    #[test]
    fn capacity_for_exactly_four() {
        let one = entry(0, 0, 100).stored_bytes();
        let mut s = ParityStore::new(4 * one);
        for c in 0..4 {
            s.put(entry(0, c, 100)).unwrap();
        }
        assert!(matches!(s.put(entry(0, 4, 100)), Err(StoreError::CapacityExceeded { .. })));
        assert_eq!(s.len(), 4);
        assert_eq!(s.used_bytes(), 4 * one);
        // replacing an entry in place still fits
        s.put(entry(0, 2, 100)).unwrap();
        assert_eq!(s.used_bytes(), s.audit());
    }

    #[test]
    fn corruption_detected() {
        let mut s = ParityStore::unbounded();
        s.put(entry(5, 1, 16)).unwrap();
        assert!(s.corrupt(5, ChunkId(1), 1, 3, 0));
        assert!(matches!(s.get(5, ChunkId(1)), Err(StoreError::ChecksumMismatch { .. })));
        assert!(!s.corrupt(5, ChunkId(9), 0, 0, 0));
    }

    #[test]
    fn eviction_and_peak() {
        let mut s = ParityStore::unbounded();
        for c in 0..3 {
            s.put(entry(1, c, 10)).unwrap();
            s.put(entry(2, c, 10)).unwrap();
        }
        let peak = s.used_bytes();
        let freed = s.evict_request(1);
        assert_eq!(freed, 3 * entry(1, 0, 10).stored_bytes());
        assert_eq!(s.len(), 3);
        assert_eq!(s.peak_bytes(), peak);
        assert_eq!(s.used_bytes(), s.audit());
        assert_eq!(s.chunks_of(2).count(), 3);
    }

    #[test]
    fn file_round_trip() {
        let scheme = CodingScheme::reed_solomon(4, 2).unwrap();
        let mut s = ParityStore::unbounded();
        for c in 0..3 {
            s.put(entry(7, c, 33)).unwrap();
        }
        s.corrupt(7, ChunkId(2), 0, 0, 1);
        let mut buf = Vec::new();
        s.save(&scheme, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"GSRV");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(&buf[6..9], &[2, 4, 2]);

        let (loaded_scheme, loaded) = ParityStore::load(&buf[..], usize::MAX).unwrap();
        assert_eq!(loaded_scheme, scheme);
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.get(7, ChunkId(0)).unwrap(), s.get(7, ChunkId(0)).unwrap());
        assert!(matches!(loaded.get(7, ChunkId(2)), Err(StoreError::ChecksumMismatch { .. })));

        assert!(matches!(ParityStore::load(&b"NOPE\x01\x00\x02\x04\x02"[..], 0), Err(StoreError::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(ParityStore::load(truncated, usize::MAX), Err(StoreError::Format(_))));
    }
}
