//! Row-diagonal parity over an array of `p - 1` rows and `p + 1` columns.
//!
//! Columns `0..p-1` hold data (columns at or beyond `n` are virtual
//! all-zero shards that are never stored), column `p - 1` is row parity and
//! column `p` is diagonal parity. Cell `(r, c)` lies on diagonal
//! `(r + c) mod p`; diagonal `p - 1` is not stored.
//!
//! A shard of `L` bytes is cut into `p - 1` row blocks of `w = L / (p - 1)`
//! bytes. Byte `j` of every row block forms an independent stripe. The
//! `L mod (p - 1)` bytes left over at the end of each shard cannot carry a
//! full stripe and are coded with a two-parity Cauchy code instead.
//!
//! Both encoding and reconstruction are expressed as a recovery program:
//! a list of cells, each solved as the XOR of cells already known. The
//! program is derived once per erasure pattern by peeling row and diagonal
//! equations that have a single unknown, which reproduces the diagonal walk,
//! and then applied to every stripe.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::gf::xor_slice;
use super::{CodingError, PARALLEL_MIN_LEN, PARALLEL_BLOCK};

/// Geometry of a (possibly shortened) RDP array for `n` data shards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RdpGeometry {
    prime: usize,
    data_shards: usize,
}

/// Location of one element of the RDP array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
struct Step {
    target: Cell,
    sources: Vec<Cell>,
}

/// Ordered XOR program that solves every cell of the erased columns.
#[derive(Clone, Debug)]
pub(crate) struct RecoveryProgram {
    steps: Vec<Step>,
    /// Array columns whose cells the program produces.
    erased: Vec<usize>,
}

pub fn smallest_prime_at_least(v: usize) -> usize {
    let is_prime = |x: usize| x >= 2 && (2..).take_while(|d| d * d <= x).all(|d| x % d != 0);
    (v.max(2)..).find(|&x| is_prime(x)).unwrap()
}

impl RdpGeometry {
    pub fn new(data_shards: usize) -> Self {
        assert!(data_shards >= 1);
        RdpGeometry { prime: smallest_prime_at_least(data_shards + 1), data_shards }
    }

    pub fn prime(&self) -> usize {
        self.prime
    }

    pub fn rows(&self) -> usize {
        self.prime - 1
    }

    pub fn data_shards(&self) -> usize {
        self.data_shards
    }

    /// Data columns that exist only as zeros.
    pub fn virtual_columns(&self) -> std::ops::Range<usize> {
        self.data_shards..self.prime - 1
    }

    pub fn row_parity_column(&self) -> usize {
        self.prime - 1
    }

    pub fn diagonal_parity_column(&self) -> usize {
        self.prime
    }

    /// Array column for a shard index (`n` is row parity, `n + 1` diagonal).
    pub fn column_of_shard(&self, shard: usize) -> usize {
        match shard {
            s if s < self.data_shards => s,
            s if s == self.data_shards => self.row_parity_column(),
            s if s == self.data_shards + 1 => self.diagonal_parity_column(),
            _ => panic!("shard index {shard} outside RDP array"),
        }
    }

    pub fn shard_of_column(&self, col: usize) -> Option<usize> {
        if col < self.data_shards {
            Some(col)
        } else if col == self.row_parity_column() {
            Some(self.data_shards)
        } else if col == self.diagonal_parity_column() {
            Some(self.data_shards + 1)
        } else {
            None
        }
    }

    fn is_virtual(&self, col: usize) -> bool {
        self.virtual_columns().contains(&col)
    }

    /// Stored data/row-parity cells of row `r` (the row equation minus nothing).
    fn row_equation(&self, r: usize) -> Vec<Cell> {
        (0..self.prime).filter(|&c| !self.is_virtual(c)).map(|col| Cell { row: r, col }).collect()
    }

    /// Cells on stored diagonal `d`, including its diagonal-parity cell.
    fn diagonal_equation(&self, d: usize) -> Vec<Cell> {
        let p = self.prime;
        let mut cells: Vec<Cell> = (0..p)
            .filter(|&c| !self.is_virtual(c))
            .filter_map(|c| {
                let r = (d + p - c) % p;
                (r < p - 1).then_some(Cell { row: r, col: c })
            })
            .collect();
        cells.push(Cell { row: d, col: self.diagonal_parity_column() });
        cells
    }

    /// Data-column membership masks: entry `[0]` is the row-parity mask
    /// (all ones over stored data), entry `[1]` lists per diagonal the
    /// `(row, data column)` cells that feed it, excluding row-parity cells.
    pub fn membership(&self) -> (Vec<u8>, Vec<Vec<(usize, usize)>>) {
        let row_mask = vec![1u8; self.data_shards];
        let diagonals = (0..self.rows())
            .map(|d| {
                self.diagonal_equation(d)
                    .into_iter()
                    .filter(|c| c.col < self.data_shards)
                    .map(|c| (c.row, c.col))
                    .collect()
            })
            .collect();
        (row_mask, diagonals)
    }

    /// Peel row and diagonal equations until every erased cell is known.
    pub(crate) fn program(&self, erased_shards: &BTreeSet<usize>) -> Result<RecoveryProgram, CodingError> {
        let erased: Vec<usize> = erased_shards.iter().map(|&s| self.column_of_shard(s)).collect();
        let mut unknown: BTreeSet<Cell> = erased
            .iter()
            .flat_map(|&col| (0..self.rows()).map(move |row| Cell { row, col }))
            .collect();

        let mut equations: Vec<Vec<Cell>> = (0..self.rows()).map(|r| self.row_equation(r)).collect();
        equations.extend((0..self.rows()).map(|d| self.diagonal_equation(d)));

        let mut steps = Vec::with_capacity(unknown.len());
        while !unknown.is_empty() {
            let mut progressed = false;
            for eq in &equations {
                let mut missing = eq.iter().filter(|c| unknown.contains(c));
                let (Some(&target), None) = (missing.next(), missing.next()) else {
                    continue;
                };
                let sources = eq.iter().copied().filter(|c| *c != target).collect();
                unknown.remove(&target);
                steps.push(Step { target, sources });
                progressed = true;
            }
            if !progressed {
                return Err(CodingError::TooManyErasures { lost: erased_shards.len(), tolerance: 2 });
            }
        }
        Ok(RecoveryProgram { steps, erased })
    }
}

impl RecoveryProgram {
    /// Run the program over the body of each shard and return the erased
    /// columns' body bytes, keyed by array column.
    ///
    /// `shards[col]` is the body of array column `col` (`None` for erased or
    /// virtual columns); `width` is the row-block width.
    pub(crate) fn apply(&self, geom: &RdpGeometry, shards: &[Option<&[u8]>], width: usize) -> Vec<(usize, Vec<u8>)> {
        let rows = geom.rows();
        let mut outputs: Vec<(usize, Vec<u8>)> = self.erased.iter().map(|&c| (c, vec![0u8; rows * width])).collect();
        if width == 0 {
            return outputs;
        }

        let run = |lo: usize, hi: usize| -> Vec<Vec<u8>> {
            // solved[erased_idx * rows + row]
            let mut solved: Vec<Vec<u8>> = vec![Vec::new(); self.erased.len() * rows];
            let len = hi - lo;
            for step in &self.steps {
                let mut acc = vec![0u8; len];
                for src in &step.sources {
                    if let Some(e) = self.erased.iter().position(|&c| c == src.col) {
                        xor_slice(&solved[e * rows + src.row], &mut acc);
                    } else if let Some(buf) = shards[src.col] {
                        let off = src.row * width;
                        xor_slice(&buf[off + lo..off + hi], &mut acc);
                    }
                }
                let e = self.erased.iter().position(|&c| c == step.target.col).expect("target is erased");
                solved[e * rows + step.target.row] = acc;
            }
            solved
        };

        let ranges: Vec<(usize, usize)> = if width * rows >= PARALLEL_MIN_LEN {
            (0..width).step_by(PARALLEL_BLOCK).map(|lo| (lo, (lo + PARALLEL_BLOCK).min(width))).collect()
        } else {
            vec![(0, width)]
        };
        let pieces: Vec<((usize, usize), Vec<Vec<u8>>)> = if ranges.len() > 1 {
            ranges.par_iter().map(|&(lo, hi)| ((lo, hi), run(lo, hi))).collect()
        } else {
            ranges.iter().map(|&(lo, hi)| ((lo, hi), run(lo, hi))).collect()
        };

        for ((lo, hi), solved) in pieces {
            for (e, (_, out)) in outputs.iter_mut().enumerate() {
                for row in 0..rows {
                    let off = row * width;
                    out[off + lo..off + hi].copy_from_slice(&solved[e * rows + row]);
                }
            }
        }
        outputs
    }

    #[cfg(test)]
    pub(crate) fn order(&self) -> Vec<Cell> {
        self.steps.iter().map(|s| s.target).collect()
    }
}
