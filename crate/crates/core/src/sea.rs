//! Segmented exponent alignment and the maximum-exponent baseline.
//!
//! The 5-bit input exponent is classified by its three most significant bits:
//! `000` is near-zero, `11x` near-maximum, anything else center. Each group
//! aligns to its own shared exponent instead of the global maximum.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcodec::MAX_EXPONENT_CODE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentGroup {
    NearZero,
    Center,
    NearMax,
}

impl ExponentGroup {
    pub const ALL: [ExponentGroup; 3] = [Self::NearZero, Self::Center, Self::NearMax];

    /// Exponent codes belonging to the group.
    pub fn range(self) -> RangeInclusive<u8> {
        match self {
            Self::NearZero => 0..=3,
            Self::Center => 4..=23,
            Self::NearMax => 24..=31,
        }
    }

    pub fn flag(self) -> GroupFlag {
        GroupFlag(match self {
            Self::NearZero => 0b00,
            Self::Center => 0b01,
            Self::NearMax => 0b10,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NearZero => "near_zero",
            Self::Center => "center",
            Self::NearMax => "near_max",
        }
    }
}

impl fmt::Display for ExponentGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifies a biased exponent code by its top three bits.
///
/// Panics if `e_in` is not a 5-bit code.
pub fn classify_exponent(e_in: u8) -> ExponentGroup {
    assert!(e_in <= MAX_EXPONENT_CODE, "exponent code {e_in} out of range");
    match e_in >> 2 {
        0b000 => ExponentGroup::NearZero,
        0b110 | 0b111 => ExponentGroup::NearMax,
        _ => ExponentGroup::Center,
    }
}

/// Checked variant of [`classify_exponent`].
pub fn try_classify_exponent(e_in: u32) -> Result<ExponentGroup> {
    u8::try_from(e_in)
        .ok()
        .filter(|&e| e <= MAX_EXPONENT_CODE)
        .map(classify_exponent)
        .ok_or(Error::ExponentOutOfRange(e_in))
}

/// The 2-bit per-wordline group tag carried to the activation controller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupFlag(u8);

impl GroupFlag {
    pub const RESERVED: GroupFlag = GroupFlag(0b11);

    /// Keeps the low two bits of `code`.
    pub fn from_code(code: u8) -> Self {
        GroupFlag(code & 0b11)
    }

    pub fn code(self) -> u8 {
        self.0
    }
}

impl From<ExponentGroup> for GroupFlag {
    fn from(group: ExponentGroup) -> Self {
        group.flag()
    }
}

impl TryFrom<GroupFlag> for ExponentGroup {
    type Error = Error;

    fn try_from(flag: GroupFlag) -> Result<Self> {
        match flag.0 {
            0b00 => Ok(ExponentGroup::NearZero),
            0b01 => Ok(ExponentGroup::Center),
            0b10 => Ok(ExponentGroup::NearMax),
            _ => Err(Error::ReservedFlag),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedExponentPolicy {
    /// Predefined `E_z`, `E_c`, `E_m`.
    #[default]
    Static,
    /// Each group aligns to the largest exponent among its members.
    DynamicGroupMax,
}

impl FromStr for SharedExponentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "dynamic_group_max" | "dynamic" => Ok(Self::DynamicGroupMax),
            other => Err(Error::config(format!("unknown shared-exponent policy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeaConfig {
    pub e_z: u8,
    pub e_c: u8,
    pub e_m: u8,
    pub policy: SharedExponentPolicy,
    pub shift_cap: u32,
}

impl Default for SeaConfig {
    fn default() -> Self {
        // Region maxima: every static shift is non-negative.
        Self {
            e_z: 3,
            e_c: 23,
            e_m: 31,
            policy: SharedExponentPolicy::Static,
            shift_cap: 31,
        }
    }
}

impl SeaConfig {
    pub fn dynamic() -> Self {
        Self {
            policy: SharedExponentPolicy::DynamicGroupMax,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("e_z", self.e_z), ("e_c", self.e_c), ("e_m", self.e_m)] {
            if e > MAX_EXPONENT_CODE {
                return Err(Error::config(format!("{name} = {e} is outside [0, 31]")));
            }
        }
        Ok(())
    }

    /// The predefined shared exponent of `group`.
    pub fn static_shared(&self, group: ExponentGroup) -> u8 {
        match group {
            ExponentGroup::NearZero => self.e_z,
            ExponentGroup::Center => self.e_c,
            ExponentGroup::NearMax => self.e_m,
        }
    }
}

/// Shared exponent of `group` under `config`. `members` are the exponent
/// codes of the group's inputs and only matter for the dynamic policy.
pub fn shared_exponent(group: ExponentGroup, members: &[u8], config: &SeaConfig) -> Result<u8> {
    match config.policy {
        SharedExponentPolicy::Static => Ok(config.static_shared(group)),
        SharedExponentPolicy::DynamicGroupMax => {
            if let Some(&stray) = members.iter().find(|&&e| classify_exponent(e) != group) {
                return Err(Error::config(format!(
                    "exponent {stray} is not a member of group {group}"
                )));
            }
            members
                .iter()
                .copied()
                .max()
                .ok_or(Error::EmptyInput("dynamic shared exponent of an empty group"))
        }
    }
}

/// Result of an alignment-shift computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SeaShift {
    pub shift: u32,
    /// The shared exponent was below `e_in`; the raw shift was negative and
    /// has been clamped to zero.
    pub clamped: bool,
}

/// `shared − e_in`, clamped to `[0, shift_cap]`.
pub fn sea_shift(e_in: u8, shared: u8, shift_cap: u32) -> SeaShift {
    let raw = i32::from(shared) - i32::from(e_in);
    SeaShift {
        shift: (raw.max(0) as u32).min(shift_cap),
        clamped: raw < 0,
    }
}

/// Global maximum found by a balanced binary comparison tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComparisonTreeMax {
    pub max: u8,
    /// Number of comparator levels, `ceil(log2 n)`.
    pub depth: u32,
    /// Number of two-input comparators, `n − 1`.
    pub comparators: usize,
}

pub fn mea_max_exponent(exponents: &[u8]) -> Result<ComparisonTreeMax> {
    if exponents.is_empty() {
        return Err(Error::EmptyInput("maximum exponent of an empty input group"));
    }
    let mut level: Vec<u8> = exponents.to_vec();
    let mut depth = 0;
    let mut comparators = 0;
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match *pair {
                [a, b] => {
                    comparators += 1;
                    a.max(b)
                }
                [a] => a,
                _ => unreachable!(),
            })
            .collect();
        depth += 1;
    }
    Ok(ComparisonTreeMax {
        max: level[0],
        depth,
        comparators,
    })
}

/// `e_max − e_in`.
pub fn mea_shift(e_in: u8, e_max: u8) -> Result<u32> {
    e_max
        .checked_sub(e_in)
        .map(u32::from)
        .ok_or(Error::ShiftUnderflow { e_in, e_max })
}
