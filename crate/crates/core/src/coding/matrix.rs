//! Dense matrices over GF(2^8) and the coefficient matrices of the
//! byte-wise linear codes.

use super::gf::Gf256;
use super::CodingError;

#[derive(Clone, PartialEq, Eq)]
pub struct GfMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Gf256>,
}

impl std::fmt::Debug for GfMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "GfMatrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{:02x}", v.0)).collect();
            writeln!(f, "  [{}]", row.join(" "))?;
        }
        Ok(())
    }
}

impl GfMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        GfMatrix { rows, cols, entries: vec![Gf256::ZERO; rows * cols] }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size, size);
        for i in 0..size {
            m.set(i, i, Gf256::ONE);
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged matrix");
        GfMatrix { rows: r, cols: c, entries: rows.into_iter().flatten().map(Gf256).collect() }
    }

    /// Cauchy matrix with `x_i = i` for rows and `y_j = rows + j` for columns.
    /// Every square submatrix of a Cauchy matrix is nonsingular.
    pub fn cauchy(rows: usize, cols: usize) -> Self {
        assert!(rows + cols <= 256, "Cauchy points must be distinct field elements");
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let denom = Gf256(i as u8) + Gf256((rows + j) as u8);
                m.set(i, j, denom.inv().expect("x_i and y_j are disjoint"));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Gf256 {
        self.entries[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Gf256) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Gf256] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|r| self.row(r).iter().map(|v| v.0).collect()).collect()
    }

    pub fn mul(&self, rhs: &GfMatrix) -> GfMatrix {
        assert_eq!(self.cols, rhs.rows);
        let mut out = GfMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = Gf256::ZERO;
                for t in 0..self.cols {
                    acc += self.get(i, t) * rhs.get(t, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Matrix built from the given rows of `self`, in order.
    pub fn select_rows(&self, rows: &[usize]) -> GfMatrix {
        let mut out = GfMatrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            for c in 0..self.cols {
                out.set(dst, c, self.get(src, c));
            }
        }
        out
    }

    /// Gauss-Jordan inverse of a square matrix.
    pub fn invert(&self) -> Result<GfMatrix, CodingError> {
        if self.rows != self.cols {
            return Err(CodingError::SingularMatrix);
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = GfMatrix::identity(n);
        for col in 0..n {
            let pivot = (col..n).find(|&r| a.get(r, col) != Gf256::ZERO).ok_or(CodingError::SingularMatrix)?;
            if pivot != col {
                a.swap_rows(pivot, col);
                inv.swap_rows(pivot, col);
            }
            let scale = a.get(col, col).inv().expect("pivot is nonzero");
            for c in 0..n {
                a.set(col, c, a.get(col, c) * scale);
                inv.set(col, c, inv.get(col, c) * scale);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a.get(r, col);
                if factor == Gf256::ZERO {
                    continue;
                }
                for c in 0..n {
                    let av = a.get(r, c) + factor * a.get(col, c);
                    a.set(r, c, av);
                    let iv = inv.get(r, c) + factor * inv.get(col, c);
                    inv.set(r, c, iv);
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.entries.swap(a * self.cols + c, b * self.cols + c);
        }
    }
}
