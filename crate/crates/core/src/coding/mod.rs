//! Erasure codes over GF(2^8): single parity (XOR), row-diagonal parity
//! (RDP) and systematic Reed-Solomon built from a Cauchy matrix.
//!
//! All three codes are byte-wise linear, so FP16 words (or any other
//! fixed-width bit pattern) can be coded as consecutive byte symbols.
//!
//! Shard indices follow the usual systematic layout: `0..n` are data shards
//! and `n..n + k` are parity shards.

pub mod gf;
mod matrix;
mod rdp;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gf::{gf_inv, gf_mul, Gf256};
pub use matrix::GfMatrix;
pub use rdp::{Cell, RdpGeometry};

/// Shards at least this long are coded stripe-parallel.
pub(crate) const PARALLEL_MIN_LEN: usize = 256 * 1024;
/// Width of one stripe range handed to a worker thread.
pub(crate) const PARALLEL_BLOCK: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error("invalid coding scheme: {0}")]
    InvalidScheme(String),
    #[error("expected {expected} data shards, got {got}")]
    ShardCount { expected: usize, got: usize },
    #[error("shard {index} has length {len}, expected {expected}")]
    LengthMismatch { index: usize, len: usize, expected: usize },
    #[error("{lost} shards lost but the scheme tolerates at most {tolerance}")]
    TooManyErasures { lost: usize, tolerance: usize },
    #[error("surviving shard {0} was not supplied")]
    MissingShard(usize),
    #[error("shard index {index} outside 0..{total}")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("singular matrix")]
    SingularMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Xor,
    Rdp,
    #[serde(alias = "rs")]
    ReedSolomon,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Xor => "xor",
            SchemeKind::Rdp => "rdp",
            SchemeKind::ReedSolomon => "reed_solomon",
        }
    }

    /// Stable one-byte tag used by on-disk formats.
    pub fn tag(self) -> u8 {
        match self {
            SchemeKind::Xor => 0,
            SchemeKind::Rdp => 1,
            SchemeKind::ReedSolomon => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SchemeKind::Xor),
            1 => Some(SchemeKind::Rdp),
            2 => Some(SchemeKind::ReedSolomon),
            _ => None,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = CodingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xor" => Ok(SchemeKind::Xor),
            "rdp" => Ok(SchemeKind::Rdp),
            "rs" | "reed_solomon" | "reed-solomon" | "reedsolomon" => Ok(SchemeKind::ReedSolomon),
            other => Err(CodingError::InvalidScheme(format!("unknown scheme kind {other:?}"))),
        }
    }
}

/// A code together with its data-shard count `n` and parity-shard count `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct CodingScheme {
    kind: SchemeKind,
    n: usize,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    kind: SchemeKind,
    n: usize,
    k: usize,
}

impl TryFrom<RawScheme> for CodingScheme {
    type Error = CodingError;
    fn try_from(raw: RawScheme) -> Result<Self, Self::Error> {
        CodingScheme::new(raw.kind, raw.n, raw.k)
    }
}

impl From<CodingScheme> for RawScheme {
    fn from(s: CodingScheme) -> Self {
        RawScheme { kind: s.kind, n: s.n, k: s.k }
    }
}

impl CodingScheme {
    pub fn new(kind: SchemeKind, n: usize, k: usize) -> Result<Self, CodingError> {
        if n == 0 {
            return Err(CodingError::InvalidScheme("n must be positive".into()));
        }
        if n + k > 255 {
            return Err(CodingError::InvalidScheme(format!("n + k = {} exceeds 255", n + k)));
        }
        match kind {
            SchemeKind::Xor if k != 1 => Err(CodingError::InvalidScheme(format!("xor needs k = 1, got {k}"))),
            SchemeKind::Rdp if k != 2 => Err(CodingError::InvalidScheme(format!("rdp needs k = 2, got {k}"))),
            SchemeKind::ReedSolomon if k == 0 || k > n => {
                Err(CodingError::InvalidScheme(format!("reed-solomon needs 1 <= k <= n, got n = {n}, k = {k}")))
            }
            _ => Ok(CodingScheme { kind, n, k }),
        }
    }

    pub fn xor(n: usize) -> Result<Self, CodingError> {
        Self::new(SchemeKind::Xor, n, 1)
    }

    pub fn rdp(n: usize) -> Result<Self, CodingError> {
        Self::new(SchemeKind::Rdp, n, 2)
    }

    pub fn reed_solomon(n: usize, k: usize) -> Result<Self, CodingError> {
        Self::new(SchemeKind::ReedSolomon, n, k)
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn data_shards(&self) -> usize {
        self.n
    }

    pub fn parity_shards(&self) -> usize {
        self.k
    }

    pub fn total_shards(&self) -> usize {
        self.n + self.k
    }

    /// Simultaneous shard losses the code always survives.
    pub fn max_tolerance(&self) -> usize {
        match self.kind {
            SchemeKind::Xor => 1,
            SchemeKind::Rdp => 2,
            SchemeKind::ReedSolomon => self.k,
        }
    }

    /// Parity bytes as a fraction of what full replication would store.
    pub fn overhead_ratio(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

impl fmt::Display for CodingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.kind, self.n, self.k)
    }
}

pub fn max_tolerance(scheme: &CodingScheme) -> usize {
    scheme.max_tolerance()
}

/// Set of erased shard indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ErasurePattern {
    lost: BTreeSet<usize>,
}

impl ErasurePattern {
    pub fn new<I: IntoIterator<Item = usize>>(lost: I) -> Self {
        ErasurePattern { lost: lost.into_iter().collect() }
    }

    pub fn lost(&self) -> &BTreeSet<usize> {
        &self.lost
    }

    pub fn len(&self) -> usize {
        self.lost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lost.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.lost.contains(&index)
    }

    /// Whether `scheme` can rebuild every erased shard.
    pub fn is_recoverable(&self, scheme: &CodingScheme) -> bool {
        self.lost.iter().all(|&i| i < scheme.total_shards()) && self.lost.len() <= scheme.max_tolerance()
    }
}

/// Coefficients of the parity equations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncodingMatrix {
    /// `k x n` matrix: parity `i` is `sum_j m[i][j] * data[j]`.
    Coefficients(GfMatrix),
    /// RDP parity depends on byte position, so it is described by its array
    /// geometry rather than a coefficient matrix.
    RowDiagonal(RdpGeometry),
}

impl EncodingMatrix {
    /// For RDP: row 0 is the row-parity mask and row 1 has a 1 for every
    /// data column that contributes to at least one stored diagonal.
    pub fn membership_rows(&self) -> Vec<Vec<u8>> {
        match self {
            EncodingMatrix::Coefficients(m) => m.to_rows(),
            EncodingMatrix::RowDiagonal(g) => {
                let (row_mask, diagonals) = g.membership();
                let mut diag_mask = vec![0u8; g.data_shards()];
                for (_, col) in diagonals.into_iter().flatten() {
                    diag_mask[col] = 1;
                }
                vec![row_mask, diag_mask]
            }
        }
    }
}

pub fn build_encoding_matrix(scheme: &CodingScheme) -> EncodingMatrix {
    match scheme.kind {
        SchemeKind::Xor => EncodingMatrix::Coefficients(GfMatrix::from_rows(vec![vec![1u8; scheme.n]])),
        SchemeKind::ReedSolomon => EncodingMatrix::Coefficients(GfMatrix::cauchy(scheme.k, scheme.n)),
        SchemeKind::Rdp => EncodingMatrix::RowDiagonal(RdpGeometry::new(scheme.n)),
    }
}

/// Validated (n, k) parameters for building a matrix, rejecting bad input.
pub fn try_build_encoding_matrix(kind: SchemeKind, n: usize, k: usize) -> Result<EncodingMatrix, CodingError> {
    CodingScheme::new(kind, n, k).map(|s| build_encoding_matrix(&s))
}

/// A scheme with its matrices prepared; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct Codec {
    scheme: CodingScheme,
    engine: Engine,
}

#[derive(Clone, Debug)]
enum Engine {
    Linear(GfMatrix),
    Rdp { geom: RdpGeometry, tail: GfMatrix },
}

impl Codec {
    pub fn new(scheme: CodingScheme) -> Self {
        let engine = match build_encoding_matrix(&scheme) {
            EncodingMatrix::Coefficients(m) => Engine::Linear(m),
            EncodingMatrix::RowDiagonal(geom) => Engine::Rdp { tail: GfMatrix::cauchy(2, scheme.n), geom },
        };
        Codec { scheme, engine }
    }

    pub fn scheme(&self) -> &CodingScheme {
        &self.scheme
    }

    /// Compute the `k` parity shards for `n` equal-length data shards.
    pub fn encode<B: AsRef<[u8]>>(&self, data: &[B]) -> Result<Vec<Vec<u8>>, CodingError> {
        let data: Vec<&[u8]> = data.iter().map(AsRef::as_ref).collect();
        let len = check_data(&self.scheme, &data)?;
        Ok(match &self.engine {
            Engine::Linear(m) => linear_encode(m, &data, 0..len),
            Engine::Rdp { geom, tail } => {
                let parity_shards: BTreeSet<usize> = [self.scheme.n, self.scheme.n + 1].into();
                let surviving: BTreeMap<usize, &[u8]> = data.iter().copied().enumerate().collect();
                let mut out = rdp_solve(geom, tail, &surviving, &parity_shards, len)?;
                vec![out.remove(&self.scheme.n).unwrap(), out.remove(&(self.scheme.n + 1)).unwrap()]
            }
        })
    }

    /// Rebuild every shard in `lost` from the surviving shards.
    ///
    /// `surviving` must hold every index in `0..n + k` that is not lost.
    /// The result maps each lost index (data or parity) to its bytes.
    pub fn reconstruct<B: AsRef<[u8]>>(
        &self,
        surviving: &BTreeMap<usize, B>,
        lost: &ErasurePattern,
    ) -> Result<BTreeMap<usize, Vec<u8>>, CodingError> {
        let total = self.scheme.total_shards();
        if let Some(&index) = lost.lost().iter().find(|&&i| i >= total) {
            return Err(CodingError::IndexOutOfRange { index, total });
        }
        if lost.len() > self.scheme.max_tolerance() {
            return Err(CodingError::TooManyErasures { lost: lost.len(), tolerance: self.scheme.max_tolerance() });
        }
        let mut present: BTreeMap<usize, &[u8]> = BTreeMap::new();
        for i in (0..total).filter(|i| !lost.contains(*i)) {
            let buf = surviving.get(&i).ok_or(CodingError::MissingShard(i))?;
            present.insert(i, buf.as_ref());
        }
        if let Some(&index) = surviving.keys().find(|&&i| i >= total) {
            return Err(CodingError::IndexOutOfRange { index, total });
        }
        let len = common_len(&present)?;
        if lost.is_empty() {
            return Ok(BTreeMap::new());
        }
        match &self.engine {
            Engine::Linear(m) => linear_reconstruct(m, &present, lost.lost(), 0..len),
            Engine::Rdp { geom, tail } => rdp_solve(geom, tail, &present, lost.lost(), len),
        }
    }
}

pub fn encode<B: AsRef<[u8]>>(scheme: &CodingScheme, data: &[B]) -> Result<Vec<Vec<u8>>, CodingError> {
    Codec::new(*scheme).encode(data)
}

pub fn reconstruct<B: AsRef<[u8]>>(
    scheme: &CodingScheme,
    surviving: &BTreeMap<usize, B>,
    lost: &ErasurePattern,
) -> Result<BTreeMap<usize, Vec<u8>>, CodingError> {
    Codec::new(*scheme).reconstruct(surviving, lost)
}

fn check_data(scheme: &CodingScheme, data: &[&[u8]]) -> Result<usize, CodingError> {
    if data.len() != scheme.n {
        return Err(CodingError::ShardCount { expected: scheme.n, got: data.len() });
    }
    let len = data[0].len();
    if let Some((index, d)) = data.iter().enumerate().find(|(_, d)| d.len() != len) {
        return Err(CodingError::LengthMismatch { index, len: d.len(), expected: len });
    }
    Ok(len)
}

fn common_len(shards: &BTreeMap<usize, &[u8]>) -> Result<usize, CodingError> {
    let len = shards.values().next().map_or(0, |s| s.len());
    if let Some((&index, s)) = shards.iter().find(|(_, s)| s.len() != len) {
        return Err(CodingError::LengthMismatch { index, len: s.len(), expected: len });
    }
    Ok(len)
}

/// Evaluate `out = sum coeff * src` over `range` of each source, splitting
/// long buffers into stripe ranges processed in parallel.
fn combine(terms: &[(Gf256, &[u8])], range: std::ops::Range<usize>) -> Vec<u8> {
    let len = range.len();
    let mut out = vec![0u8; len];
    let fill = |block: usize, dst: &mut [u8]| {
        let lo = range.start + block * PARALLEL_BLOCK;
        for (c, src) in terms {
            gf::mul_add_slice(*c, &src[lo..lo + dst.len()], dst);
        }
    };
    if len >= PARALLEL_MIN_LEN {
        out.par_chunks_mut(PARALLEL_BLOCK).enumerate().for_each(|(b, dst)| fill(b, dst));
    } else {
        out.chunks_mut(PARALLEL_BLOCK).enumerate().for_each(|(b, dst)| fill(b, dst));
    }
    out
}

fn linear_encode(m: &GfMatrix, data: &[&[u8]], range: std::ops::Range<usize>) -> Vec<Vec<u8>> {
    (0..m.rows())
        .map(|i| {
            let terms: Vec<(Gf256, &[u8])> = m.row(i).iter().copied().zip(data.iter().copied()).collect();
            combine(&terms, range.clone())
        })
        .collect()
}

/// Systematic linear-code reconstruction. The decoding coefficients are
/// solved once for the erasure pattern and then applied to every byte.
fn linear_reconstruct(
    m: &GfMatrix,
    present: &BTreeMap<usize, &[u8]>,
    lost: &BTreeSet<usize>,
    range: std::ops::Range<usize>,
) -> Result<BTreeMap<usize, Vec<u8>>, CodingError> {
    let n = m.cols();
    let lost_data: Vec<usize> = lost.iter().copied().filter(|&i| i < n).collect();
    let mut out = BTreeMap::new();

    if !lost_data.is_empty() {
        let parity_rows: Vec<usize> = (0..m.rows()).filter(|&i| !lost.contains(&(n + i))).take(lost_data.len()).collect();
        if parity_rows.len() < lost_data.len() {
            return Err(CodingError::TooManyErasures { lost: lost.len(), tolerance: m.rows() });
        }
        let mut sub = GfMatrix::zeros(lost_data.len(), lost_data.len());
        for (a, &row) in parity_rows.iter().enumerate() {
            for (b, &col) in lost_data.iter().enumerate() {
                sub.set(a, b, m.get(row, col));
            }
        }
        let inv = sub.invert()?;

        for (b, &target) in lost_data.iter().enumerate() {
            let mut terms: Vec<(Gf256, &[u8])> = Vec::with_capacity(n);
            for (a, &row) in parity_rows.iter().enumerate() {
                terms.push((inv.get(b, a), present[&(n + row)]));
            }
            for j in (0..n).filter(|j| !lost.contains(j)) {
                let mut c = Gf256::ZERO;
                for (a, &row) in parity_rows.iter().enumerate() {
                    c += inv.get(b, a) * m.get(row, j);
                }
                terms.push((c, present[&j]));
            }
            out.insert(target, combine(&terms, range.clone()));
        }
    }

    let lost_parity: Vec<usize> = lost.iter().copied().filter(|&i| i >= n).collect();
    if !lost_parity.is_empty() {
        let data: Vec<&[u8]> =
            (0..n).map(|j| present.get(&j).copied().unwrap_or_else(|| out[&j].as_slice())).collect();
        let rebuilt: Vec<(usize, Vec<u8>)> = lost_parity
            .iter()
            .map(|&p| {
                let terms: Vec<(Gf256, &[u8])> = m.row(p - n).iter().copied().zip(data.iter().copied()).collect();
                (p, combine(&terms, range.clone()))
            })
            .collect();
        out.extend(rebuilt);
    }
    Ok(out)
}

/// Solve the erased shards of an RDP-coded set: the body through the RDP
/// recovery program, the short tail through the two-parity Cauchy code.
fn rdp_solve(
    geom: &RdpGeometry,
    tail: &GfMatrix,
    present: &BTreeMap<usize, &[u8]>,
    lost: &BTreeSet<usize>,
    len: usize,
) -> Result<BTreeMap<usize, Vec<u8>>, CodingError> {
    let rows = geom.rows();
    let width = len / rows;
    let body = width * rows;

    let program = geom.program(lost)?;
    let mut columns: Vec<Option<&[u8]>> = vec![None; geom.diagonal_parity_column() + 1];
    for (&shard, buf) in present {
        columns[geom.column_of_shard(shard)] = Some(&buf[..body]);
    }
    let solved = program.apply(geom, &columns, width);

    let tail_present: BTreeMap<usize, &[u8]> = present.iter().map(|(&i, b)| (i, &b[body..])).collect();
    let mut tails = linear_reconstruct(tail, &tail_present, lost, 0..len - body)?;

    let mut out = BTreeMap::new();
    for (col, mut bytes) in solved {
        let shard = geom.shard_of_column(col).expect("erased columns are stored");
        bytes.extend_from_slice(&tails.remove(&shard).unwrap_or_default());
        out.insert(shard, bytes);
    }
    Ok(out)
}
