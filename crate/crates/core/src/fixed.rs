//! Q16.16 signed fixed-point arithmetic.
//!
//! All feature values, weights and aggregation results in the simulator are
//! `Fixed32`. Addition and subtraction are exact integer operations (saturating
//! at the representable range), multiplication rounds the dropped 16 fractional
//! bits to nearest (ties toward +inf) and saturates. Division by an integer
//! count rounds to nearest with ties away from zero. Keeping the rounding rules
//! pinned here is what makes the engine-vs-oracle comparisons bit-exact.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, Mul, Neg, Sub};

pub const FRAC_BITS: u32 = 16;
const SCALE: f64 = 65536.0;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fixed32 {
    raw: i32,
}

impl Fixed32 {
    pub const ZERO: Fixed32 = Fixed32 { raw: 0 };
    pub const ONE: Fixed32 = Fixed32 { raw: 1 << FRAC_BITS };
    pub const MAX: Fixed32 = Fixed32 { raw: i32::MAX };
    pub const MIN: Fixed32 = Fixed32 { raw: i32::MIN };

    #[inline]
    pub const fn from_raw(raw: i32) -> Self {
        Fixed32 { raw }
    }

    #[inline]
    pub const fn raw(self) -> i32 {
        self.raw
    }

    /// Quantize an f64, rounding to the nearest representable value and
    /// saturating outside the Q16.16 range. For in-range inputs the absolute
    /// quantization error is at most 2^-17.
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            return Fixed32::ZERO;
        }
        // `as` casts saturate on overflow.
        Fixed32 {
            raw: (x * SCALE).round() as i32,
        }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.raw as f64 / SCALE
    }

    #[inline]
    pub fn saturating_add(self, rhs: Self) -> Self {
        Fixed32 {
            raw: self.raw.saturating_add(rhs.raw),
        }
    }

    #[inline]
    pub fn saturating_sub(self, rhs: Self) -> Self {
        Fixed32 {
            raw: self.raw.saturating_sub(rhs.raw),
        }
    }

    /// Fixed-point multiply: 64-bit product, +2^15 then arithmetic shift by 16
    /// (round to nearest, ties toward +inf), saturating on overflow.
    #[inline]
    pub fn saturating_mul(self, rhs: Self) -> Self {
        let prod = self.raw as i64 * rhs.raw as i64;
        let rounded = (prod + (1 << (FRAC_BITS - 1))) >> FRAC_BITS;
        Fixed32 {
            raw: rounded.clamp(i32::MIN as i64, i32::MAX as i64) as i32,
        }
    }

    /// Divide by a positive integer count (the Mean aggregation divisor),
    /// rounding to nearest with ties away from zero.
    pub fn div_round_nearest(self, count: u32) -> Self {
        debug_assert!(count > 0);
        let n = self.raw as i64;
        let d = count as i64;
        let half = d / 2;
        let q = if n >= 0 { (n + half) / d } else { (n - half) / d };
        Fixed32 { raw: q as i32 }
    }

    #[inline]
    pub fn max(self, rhs: Self) -> Self {
        if self.raw >= rhs.raw {
            self
        } else {
            rhs
        }
    }

    #[inline]
    pub fn min(self, rhs: Self) -> Self {
        if self.raw <= rhs.raw {
            self
        } else {
            rhs
        }
    }

    /// ReLU: clamp negatives to zero.
    #[inline]
    pub fn relu(self) -> Self {
        if self.raw < 0 {
            Fixed32::ZERO
        } else {
            self
        }
    }
}

impl Add for Fixed32 {
    type Output = Fixed32;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.saturating_add(rhs)
    }
}

impl Sub for Fixed32 {
    type Output = Fixed32;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.saturating_sub(rhs)
    }
}

impl Mul for Fixed32 {
    type Output = Fixed32;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.saturating_mul(rhs)
    }
}

impl Neg for Fixed32 {
    type Output = Fixed32;
    #[inline]
    fn neg(self) -> Self {
        Fixed32 {
            raw: self.raw.saturating_neg(),
        }
    }
}

impl Sum for Fixed32 {
    fn sum<I: Iterator<Item = Fixed32>>(iter: I) -> Self {
        iter.fold(Fixed32::ZERO, |a, b| a + b)
    }
}

impl fmt::Debug for Fixed32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl fmt::Display for Fixed32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}
