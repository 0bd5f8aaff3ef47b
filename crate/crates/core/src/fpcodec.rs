//! IEEE-754 binary16 decode/encode and the exact dot-product oracle.
//!
//! Every finite half-precision value is a dyadic rational `sig × 2^(e − 25)`
//! where `sig` is the 11-bit significand and `e` the alignment exponent
//! (exponent code, with subnormals sharing the scale of code 1). The encoder
//! rounds arbitrary dyadic (or dyadic-times-rational) values with
//! round-to-nearest-even, which is the single rounding point used by the
//! macro normalizer.

use std::fmt;

use num_bigint::{BigInt, BigUint, Sign};

use crate::error::{Error, Result};

pub const EXPONENT_BIAS: i32 = 15;
/// Stored mantissa width (`M_f`).
pub const FRACTION_BITS: u32 = 10;
/// Significand width including the hidden bit.
pub const SIGNIFICAND_BITS: u32 = FRACTION_BITS + 1;
pub const MAX_EXPONENT_CODE: u8 = 31;
pub const CANONICAL_NAN: u16 = 0x7E00;
pub const MAX_DOT_LEN: usize = 4096;

const SIGN_BIT: u16 = 0x8000;
const INFINITY_BITS: u16 = 0x7C00;
/// Exponent of the significand LSB for exponent code `e`: `e - LSB_OFFSET`.
const LSB_OFFSET: i32 = EXPONENT_BIAS + FRACTION_BITS as i32;
/// LSB exponent shared by subnormals and exponent code 1.
const MIN_QUANTUM: i32 = 1 - LSB_OFFSET;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fp16Class {
    Zero,
    Subnormal,
    Normal,
    Infinite,
    Nan,
}

/// A half-precision value, stored as its raw bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fp16Value(u16);

impl Fp16Value {
    pub const ZERO: Self = Self(0);
    pub const NEG_ZERO: Self = Self(SIGN_BIT);
    pub const ONE: Self = Self(0x3C00);
    pub const MAX: Self = Self(0x7BFF);
    pub const INFINITY: Self = Self(INFINITY_BITS);
    pub const NEG_INFINITY: Self = Self(SIGN_BIT | INFINITY_BITS);

    pub const fn from_bits(raw: u16) -> Self {
        Self(raw)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// `true` for negative values (including `-0.0`).
    pub const fn sign(self) -> bool {
        self.0 & SIGN_BIT != 0
    }

    /// The 5-bit biased exponent field.
    pub const fn exponent(self) -> u8 {
        ((self.0 >> FRACTION_BITS) & 0x1F) as u8
    }

    /// The 10-bit stored fraction field.
    pub const fn fraction(self) -> u16 {
        self.0 & 0x03FF
    }

    pub fn class(self) -> Fp16Class {
        match (self.exponent(), self.fraction()) {
            (0, 0) => Fp16Class::Zero,
            (0, _) => Fp16Class::Subnormal,
            (31, 0) => Fp16Class::Infinite,
            (31, _) => Fp16Class::Nan,
            _ => Fp16Class::Normal,
        }
    }

    pub const fn is_finite(self) -> bool {
        self.exponent() != MAX_EXPONENT_CODE
    }

    pub const fn is_nan(self) -> bool {
        self.exponent() == MAX_EXPONENT_CODE && self.fraction() != 0
    }

    /// `true` for `+0.0` and `-0.0`.
    pub const fn is_zero(self) -> bool {
        self.0 & !SIGN_BIT == 0
    }

    /// Exponent code that determines the significand scale. Subnormals share
    /// the scale of code 1.
    pub fn alignment_exponent(self) -> u8 {
        self.exponent().max(1)
    }

    /// 11-bit significand: hidden bit plus fraction for normals, the bare
    /// fraction for zero and subnormals.
    pub fn significand(self) -> u16 {
        if self.exponent() == 0 {
            self.fraction()
        } else {
            (1 << FRACTION_BITS) | self.fraction()
        }
    }

    /// Exact value as a dyadic rational, `None` for infinities and NaN.
    pub fn exact(self) -> Option<Dyadic> {
        self.is_finite().then(|| Dyadic {
            negative: self.sign(),
            magnitude: u128::from(self.significand()),
            exponent: i32::from(self.alignment_exponent()) - LSB_OFFSET,
        })
    }

    pub fn to_f64(self) -> f64 {
        match self.class() {
            Fp16Class::Nan => f64::NAN,
            Fp16Class::Infinite if self.sign() => f64::NEG_INFINITY,
            Fp16Class::Infinite => f64::INFINITY,
            _ => self.exact().map(|d| d.to_f64()).unwrap_or_default(),
        }
    }

    pub fn to_f32(self) -> f32 {
        // Every binary16 value is exactly representable in binary32.
        self.to_f64() as f32
    }

    /// Round-to-nearest-even conversion from `f32`.
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        let negative = bits >> 31 != 0;
        let exp = ((bits >> 23) & 0xFF) as i32;
        let mant = bits & 0x7F_FFFF;
        if exp == 0xFF {
            return if mant != 0 {
                Self(CANONICAL_NAN)
            } else if negative {
                Self::NEG_INFINITY
            } else {
                Self::INFINITY
            };
        }
        let (magnitude, exponent) = if exp == 0 {
            (mant, -149)
        } else {
            (mant | 1 << 23, exp - 150)
        };
        Self(encode(Dyadic::new(negative, u128::from(magnitude), exponent)))
    }

    /// Round-to-nearest-even conversion from `f64`.
    pub fn from_f64(x: f64) -> Self {
        let bits = x.to_bits();
        let negative = bits >> 63 != 0;
        let exp = ((bits >> 52) & 0x7FF) as i32;
        let mant = bits & ((1 << 52) - 1);
        if exp == 0x7FF {
            return if mant != 0 {
                Self(CANONICAL_NAN)
            } else if negative {
                Self::NEG_INFINITY
            } else {
                Self::INFINITY
            };
        }
        let (magnitude, exponent) = if exp == 0 {
            (mant, -1074)
        } else {
            (mant | 1 << 52, exp - 1075)
        };
        Self(encode(Dyadic::new(negative, u128::from(magnitude), exponent)))
    }
}

impl fmt::Debug for Fp16Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp16Value({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for Fp16Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

impl From<u16> for Fp16Value {
    fn from(raw: u16) -> Self {
        Self(raw)
    }
}

/// `(-1)^negative × magnitude × 2^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dyadic {
    pub negative: bool,
    pub magnitude: u128,
    pub exponent: i32,
}

impl Dyadic {
    pub const fn new(negative: bool, magnitude: u128, exponent: i32) -> Self {
        Self {
            negative,
            magnitude,
            exponent,
        }
    }

    pub fn from_i128(value: i128, exponent: i32) -> Self {
        Self::new(value < 0, value.unsigned_abs(), exponent)
    }

    pub fn is_zero(&self) -> bool {
        self.magnitude == 0
    }

    /// Nearest `f64` (one rounding of the magnitude).
    pub fn to_f64(&self) -> f64 {
        let v = self.magnitude as f64 * pow2(self.exponent);
        if self.negative {
            -v
        } else {
            v
        }
    }
}

fn pow2(exponent: i32) -> f64 {
    // Split so that neither factor over- or underflows on its own.
    let half = exponent / 2;
    2f64.powi(half) * 2f64.powi(exponent - half)
}

/// Decodes a raw bit pattern. Total: every pattern is a valid `Fp16Value`.
pub fn decode(raw: u16) -> Fp16Value {
    Fp16Value(raw)
}

/// Encodes an exact dyadic value with round-to-nearest-even. Overflow goes to
/// signed infinity; magnitudes at or below half the smallest subnormal go to
/// signed zero.
pub fn encode(value: Dyadic) -> u16 {
    round_to_bits(value.negative, value.magnitude, value.exponent, false)
}

/// Bit pattern of a decoded value, with every NaN mapped to [`CANONICAL_NAN`].
pub fn encode_value(value: Fp16Value) -> u16 {
    match value.class() {
        Fp16Class::Nan => CANONICAL_NAN,
        Fp16Class::Infinite => value.to_bits(),
        _ => encode(value.exact().expect("finite")),
    }
}

/// Encodes `value × 2^exponent` for an arbitrary-width signed integer.
pub fn encode_big(value: &BigInt, exponent: i32) -> u16 {
    let negative = value.sign() == Sign::Minus;
    let (magnitude, exponent, sticky) = reduce_with_sticky(value.magnitude(), exponent);
    round_to_bits(negative, magnitude, exponent, sticky)
}

/// Encodes `numerator / denominator × 2^exponent`.
pub fn encode_ratio(numerator: &BigInt, denominator: u64, exponent: i32) -> u16 {
    assert!(denominator > 0, "zero denominator");
    if denominator == 1 {
        return encode_big(numerator, exponent);
    }
    let negative = numerator.sign() == Sign::Minus;
    let magnitude = numerator.magnitude();
    if magnitude.bits() == 0 {
        return if negative { SIGN_BIT } else { 0 };
    }
    // Keep at least 64 quotient bits; the remainder collapses to a sticky LSB.
    let den = BigUint::from(denominator);
    let extra = (64 + den.bits()).saturating_sub(magnitude.bits());
    let scaled = magnitude << extra;
    let quotient = &scaled / &den;
    let inexact = (&scaled % &den).bits() != 0;
    let widened = (quotient << 1u32) + BigUint::from(u8::from(inexact));
    let (magnitude, exp, sticky) = reduce_with_sticky(&widened, exponent - extra as i32 - 1);
    round_to_bits(negative, magnitude, exp, sticky)
}

fn reduce_with_sticky(magnitude: &BigUint, exponent: i32) -> (u128, i32, bool) {
    let bits = magnitude.bits();
    if bits <= 127 {
        let small = u128::try_from(magnitude).expect("fits in u128");
        return (small, exponent, false);
    }
    let drop = bits - 64;
    let kept = u128::try_from(magnitude >> drop).expect("64 bits remain");
    let sticky = magnitude.trailing_zeros().is_some_and(|tz| tz < drop);
    (kept, exponent + drop as i32, sticky)
}

/// Round-to-nearest-even core. `sticky` means the true magnitude exceeds
/// `magnitude × 2^exponent` by a nonzero amount smaller than `2^exponent`;
/// callers only set it when `magnitude` carries well over 11 bits.
fn round_to_bits(negative: bool, magnitude: u128, exponent: i32, sticky: bool) -> u16 {
    let sign = if negative { SIGN_BIT } else { 0 };
    if magnitude == 0 {
        debug_assert!(!sticky);
        return sign;
    }
    let len = 128 - magnitude.leading_zeros() as i32;
    let msb = len - 1 + exponent;
    if msb >= 16 {
        return sign | INFINITY_BITS;
    }
    let mut quantum = (msb - FRACTION_BITS as i32).max(MIN_QUANTUM);
    let shift = quantum - exponent;
    let mut n = if shift <= 0 {
        debug_assert!(!sticky || shift < -2);
        magnitude << (-shift) as u32
    } else {
        shr_round_even(magnitude, shift as u32, sticky)
    };
    if n == 1 << SIGNIFICAND_BITS {
        n = 1 << FRACTION_BITS;
        quantum += 1;
    }
    if n < 1 << FRACTION_BITS {
        // Subnormal range (or rounded to zero).
        return sign | n as u16;
    }
    let code = quantum + LSB_OFFSET;
    if code >= i32::from(MAX_EXPONENT_CODE) {
        return sign | INFINITY_BITS;
    }
    sign | (code as u16) << FRACTION_BITS | (n as u16 & 0x03FF)
}

fn shr_round_even(m: u128, shift: u32, sticky: bool) -> u128 {
    if shift > 128 {
        // m < 2^128, strictly below half of the rounding unit
        return 0;
    }
    let (q, rem, half) = if shift == 128 {
        (0, m, 1u128 << 127)
    } else {
        (m >> shift, m & ((1u128 << shift) - 1), 1u128 << (shift - 1))
    };
    let round_up = rem > half || (rem == half && (sticky || q & 1 == 1));
    q + u128::from(round_up)
}

/// Exponent of one unit of [`ExactAccumulator::scaled_sum`].
pub const ORACLE_SCALE_EXPONENT: i32 = -48;

/// Exact sum of FP16 products in units of `2^-48`.
///
/// The smallest nonzero product of two finite FP16 values is `2^-24 × 2^-24`,
/// so every product is an integer in these units and fits in 80 bits; 4096
/// such terms need fewer than 100 bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ExactAccumulator {
    scaled_sum: i128,
}

impl ExactAccumulator {
    pub const SCALE_EXPONENT: i32 = ORACLE_SCALE_EXPONENT;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn scaled_sum(&self) -> i128 {
        self.scaled_sum
    }

    /// Adds `a × b`. Both operands must be finite.
    pub fn add_product(&mut self, a: Fp16Value, b: Fp16Value) {
        self.scaled_sum += exact_product_scaled(a, b);
    }

    pub fn value(&self) -> Dyadic {
        Dyadic::from_i128(self.scaled_sum, ORACLE_SCALE_EXPONENT)
    }

    /// The correctly rounded FP16 result.
    pub fn to_fp16(&self) -> Fp16Value {
        Fp16Value(encode(self.value()))
    }

    pub fn to_f64(&self) -> f64 {
        self.value().to_f64()
    }
}

/// `a × b` in units of `2^-48`.
pub fn exact_product_scaled(a: Fp16Value, b: Fp16Value) -> i128 {
    debug_assert!(a.is_finite() && b.is_finite());
    let sig = i128::from(a.significand()) * i128::from(b.significand());
    let shift =
        i32::from(a.alignment_exponent()) + i32::from(b.alignment_exponent()) - 2 * LSB_OFFSET - ORACLE_SCALE_EXPONENT;
    let magnitude = sig << shift as u32;
    if a.sign() != b.sign() {
        -magnitude
    } else {
        magnitude
    }
}

/// Exact `Σ inputs[i] × weights[i]`.
pub fn exact_dot(inputs: &[Fp16Value], weights: &[Fp16Value]) -> Result<ExactAccumulator> {
    if inputs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: weights.len(),
        });
    }
    if inputs.len() > MAX_DOT_LEN {
        return Err(Error::DotTooLong(inputs.len()));
    }
    let mut acc = ExactAccumulator::new();
    for (index, (&a, &b)) in inputs.iter().zip(weights).enumerate() {
        for v in [a, b] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index,
                    raw: v.to_bits(),
                });
            }
        }
        acc.add_product(a, b);
    }
    Ok(acc)
}
