//! Arithmetic in GF(2^8) with the field polynomial x^8 + x^4 + x^3 + x^2 + 1.
//!
//! Multiplication goes through a 256x256 product table derived from
//! log/antilog tables. All tables are built once on first use and are
//! read-only afterwards, so every function here is safe to call from any
//! thread.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign};
use std::sync::LazyLock;

use super::CodingError;

/// Field polynomial including the x^8 term.
pub const FIELD_POLY: u16 = 0x11D;

struct Tables {
    /// exp[i] = g^i, doubled so exp[log a + log b] never needs a modulo.
    exp: [u8; 512],
    log: [u8; 256],
    mul: Box<[[u8; 256]; 256]>,
    inv: [u8; 256],
}

static TABLES: LazyLock<Tables> = LazyLock::new(build_tables);

fn build_tables() -> Tables {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    for i in 0..255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        // multiply by the generator 2, which is primitive for 0x11D
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= FIELD_POLY;
        }
    }
    debug_assert_eq!(x, 1, "generator must have order 255");
    for i in 255..512 {
        exp[i] = exp[i - 255];
    }

    let mut mul = Box::new([[0u8; 256]; 256]);
    for a in 1..256usize {
        for b in 1..256usize {
            mul[a][b] = exp[log[a] as usize + log[b] as usize];
        }
    }

    let mut inv = [0u8; 256];
    for a in 1..256usize {
        inv[a] = exp[255 - log[a] as usize];
    }

    Tables { exp, log, mul, inv }
}

/// One symbol of GF(2^8).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Gf256(pub u8);

impl Gf256 {
    pub const ZERO: Gf256 = Gf256(0);
    pub const ONE: Gf256 = Gf256(1);

    #[inline]
    pub fn value(self) -> u8 {
        self.0
    }

    /// Multiplicative inverse; `None` for zero.
    #[inline]
    pub fn inv(self) -> Option<Gf256> {
        if self.0 == 0 {
            None
        } else {
            Some(Gf256(TABLES.inv[self.0 as usize]))
        }
    }

    /// g^e for the field generator g = 2.
    pub fn exp(e: usize) -> Gf256 {
        Gf256(TABLES.exp[e % 255])
    }

    /// Discrete log base 2; `None` for zero.
    pub fn log(self) -> Option<u8> {
        if self.0 == 0 {
            None
        } else {
            Some(TABLES.log[self.0 as usize])
        }
    }

    pub fn pow(self, mut e: u32) -> Gf256 {
        let mut base = self;
        let mut acc = Gf256::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
}

impl fmt::Debug for Gf256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gf256({:#04x})", self.0)
    }
}

impl From<u8> for Gf256 {
    fn from(v: u8) -> Self {
        Gf256(v)
    }
}

impl Add for Gf256 {
    type Output = Gf256;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn add(self, rhs: Gf256) -> Gf256 {
        Gf256(self.0 ^ rhs.0)
    }
}

impl AddAssign for Gf256 {
    #[inline]
    #[allow(clippy::suspicious_op_assign_impl)]
    fn add_assign(&mut self, rhs: Gf256) {
        self.0 ^= rhs.0;
    }
}

impl Mul for Gf256 {
    type Output = Gf256;
    #[inline]
    fn mul(self, rhs: Gf256) -> Gf256 {
        Gf256(TABLES.mul[self.0 as usize][rhs.0 as usize])
    }
}

impl MulAssign for Gf256 {
    #[inline]
    fn mul_assign(&mut self, rhs: Gf256) {
        *self = *self * rhs;
    }
}

impl Div for Gf256 {
    type Output = Gf256;
    /// Panics on division by zero.
    #[inline]
    fn div(self, rhs: Gf256) -> Gf256 {
        self * rhs.inv().expect("division by zero in GF(2^8)")
    }
}

/// Table-driven product.
#[inline]
pub fn gf_mul(a: Gf256, b: Gf256) -> Gf256 {
    a * b
}

pub fn gf_inv(a: Gf256) -> Result<Gf256, CodingError> {
    a.inv().ok_or(CodingError::ZeroInverse)
}

/// `dst[i] ^= c * src[i]` over the whole slice.
pub fn mul_add_slice(c: Gf256, src: &[u8], dst: &mut [u8]) {
    debug_assert_eq!(src.len(), dst.len());
    match c.0 {
        0 => {}
        1 => xor_slice(src, dst),
        _ => {
            let row = &TABLES.mul[c.0 as usize];
            for (d, s) in dst.iter_mut().zip(src) {
                *d ^= row[*s as usize];
            }
        }
    }
}

/// `dst[i] = c * src[i]`.
pub fn mul_slice(c: Gf256, src: &[u8], dst: &mut [u8]) {
    debug_assert_eq!(src.len(), dst.len());
    match c.0 {
        0 => dst.fill(0),
        1 => dst.copy_from_slice(src),
        _ => {
            let row = &TABLES.mul[c.0 as usize];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = row[*s as usize];
            }
        }
    }
}

/// `dst[i] ^= src[i]`, eight bytes at a time where possible.
pub fn xor_slice(src: &[u8], dst: &mut [u8]) {
    debug_assert_eq!(src.len(), dst.len());
    let mut d_words = dst.chunks_exact_mut(8);
    let mut s_words = src.chunks_exact(8);
    for (d, s) in (&mut d_words).zip(&mut s_words) {
        let v = u64::from_ne_bytes(d.try_into().unwrap()) ^ u64::from_ne_bytes(s.try_into().unwrap());
        d.copy_from_slice(&v.to_ne_bytes());
    }
    for (d, s) in d_words.into_remainder().iter_mut().zip(s_words.remainder()) {
        *d ^= *s;
    }
}
