//! Input significand alignment under the dynamic-width (DWI) and fixed-width
//! (FWI) bit-serial input policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcodec::{Fp16Value, SIGNIFICAND_BITS};
use crate::sea::GroupFlag;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WidthPolicy {
    /// Keep the 11 most significant bits of every shifted significand.
    #[default]
    Fwi,
    /// Extend the register by `m_d` bits. `None` sizes it per activation
    /// phase to the largest shift, which makes alignment lossless.
    Dwi {
        #[serde(default)]
        m_d: Option<u32>,
    },
}

impl WidthPolicy {
    pub const fn dwi_auto() -> Self {
        WidthPolicy::Dwi { m_d: None }
    }

    /// Extra width `M_d` for a phase whose largest required shift is
    /// `max_shift`.
    pub fn extra_width(self, max_shift: u32) -> u32 {
        match self {
            WidthPolicy::Fwi => 0,
            WidthPolicy::Dwi { m_d: Some(m_d) } => m_d,
            WidthPolicy::Dwi { m_d: None } => max_shift,
        }
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, WidthPolicy::Fwi)
    }
}

/// What an automatically sized DWI register is sized over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwiScope {
    /// Each activation phase of each macro call.
    #[default]
    Call,
    /// The largest shift any call of a layer needs.
    Layer,
}

impl std::str::FromStr for DwiScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "call" => Ok(DwiScope::Call),
            "layer" => Ok(DwiScope::Layer),
            _ => Err(Error::config(format!("unknown DWI scope {s:?}"))),
        }
    }
}

/// One input after preprocessing, as loaded into its input register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlignedInput {
    pub significand: u64,
    /// `true` for negative inputs.
    pub sign: bool,
    pub shift_applied: u32,
    pub group_flag: GroupFlag,
    /// Number of 1-bits lost off the LSB end.
    pub dropped_bits: u32,
    /// Register width in bits, `11 + M_d`.
    pub width: u32,
}

/// Significand and width produced by [`align`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Aligned {
    pub significand: u64,
    pub dropped_bits: u32,
    pub width: u32,
}

/// The 11-bit significand (hidden bit included for normals) and sign.
pub fn raw_significand(v: Fp16Value) -> Result<(u16, bool)> {
    if !v.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            raw: v.to_bits(),
        });
    }
    Ok((v.significand(), v.sign()))
}

/// Places `sig` into a register of `11 + extra_width` bits after a right
/// shift by `shift`: the result is `floor(sig × 2^(extra_width − shift))`.
/// With `extra_width = 0` this is fixed-width truncation; with
/// `extra_width ≥ shift` nothing is lost.
pub fn align(sig: u16, shift: u32, extra_width: u32) -> Aligned {
    debug_assert!(u32::from(sig) < 1 << SIGNIFICAND_BITS);
    debug_assert!(extra_width <= 52);
    let sig = u64::from(sig);
    let width = SIGNIFICAND_BITS + extra_width;
    let (significand, dropped_bits) = if shift <= extra_width {
        (sig << (extra_width - shift), 0)
    } else {
        let residual = shift - extra_width;
        if residual >= SIGNIFICAND_BITS {
            (0, sig.count_ones())
        } else {
            let lost = sig & ((1 << residual) - 1);
            (sig >> residual, lost.count_ones())
        }
    };
    Aligned {
        significand,
        dropped_bits,
        width,
    }
}

/// [`align`] for a whole input, tagged with its group flag.
pub fn align_input(v: Fp16Value, shift: u32, extra_width: u32, group_flag: GroupFlag) -> Result<AlignedInput> {
    let (sig, sign) = raw_significand(v)?;
    let a = align(sig, shift, extra_width);
    Ok(AlignedInput {
        significand: a.significand,
        sign,
        shift_applied: shift,
        group_flag,
        dropped_bits: a.dropped_bits,
        width: a.width,
    })
}
