//! The analog crossbar: pre-aligned weight storage in binary cells, bitline
//! summation and the column ADC.
//!
//! Each logical weight column is pre-aligned offline to its largest exponent
//! `E_w` and stored as `w_s` one-bit cell columns (slice 0 is the MSB). Rows
//! are wordlines; a tile holds at most 128 of them, so a set of rows is a
//! `u128` bitmask.

use std::fmt;
use std::ops::{BitAnd, BitOr, Not};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcodec::{Dyadic, Fp16Value, EXPONENT_BIAS, SIGNIFICAND_BITS};

pub const MACRO_ROWS: usize = 128;
pub const MACRO_CELLS: usize = 128 * 128;
pub const MAX_WEIGHT_WIDTH: u32 = 64;

/// A set of wordlines.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RowMask(pub u128);

impl RowMask {
    pub const EMPTY: RowMask = RowMask(0);

    /// Rows `0..rows`.
    pub fn first(rows: usize) -> Self {
        assert!(rows <= MACRO_ROWS);
        if rows == MACRO_ROWS {
            RowMask(u128::MAX)
        } else {
            RowMask((1u128 << rows) - 1)
        }
    }

    pub fn from_rows<I: IntoIterator<Item = usize>>(rows: I) -> Self {
        RowMask(rows.into_iter().fold(0u128, |m, r| {
            assert!(r < MACRO_ROWS, "row {r} out of range");
            m | 1 << r
        }))
    }

    pub fn contains(self, row: usize) -> bool {
        row < MACRO_ROWS && self.0 >> row & 1 == 1
    }

    pub fn insert(&mut self, row: usize) {
        assert!(row < MACRO_ROWS);
        self.0 |= 1 << row;
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            (bits != 0).then(|| {
                let r = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                r
            })
        })
    }
}

impl fmt::Debug for RowMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl BitAnd for RowMask {
    type Output = RowMask;
    fn bitand(self, rhs: RowMask) -> RowMask {
        RowMask(self.0 & rhs.0)
    }
}

impl BitOr for RowMask {
    type Output = RowMask;
    fn bitor(self, rhs: RowMask) -> RowMask {
        RowMask(self.0 | rhs.0)
    }
}

impl Not for RowMask {
    type Output = RowMask;
    fn not(self) -> RowMask {
        RowMask(!self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdcMode {
    #[default]
    Ideal,
    Quantized,
}

/// Uniform mid-tread quantizer over `[0, full_scale]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdcModel {
    pub bits: u32,
    pub full_scale: u32,
    pub mode: AdcMode,
}

impl Default for AdcModel {
    fn default() -> Self {
        Self {
            bits: 6,
            full_scale: MACRO_ROWS as u32,
            mode: AdcMode::Ideal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdcReading {
    pub code: u32,
    /// The bitline sum exceeded full scale.
    pub clipped: bool,
}

impl AdcModel {
    pub fn quantized(bits: u32, full_scale: u32) -> Self {
        Self {
            bits,
            full_scale,
            mode: AdcMode::Quantized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == AdcMode::Quantized && !(1..=16).contains(&self.bits) {
            return Err(Error::config(format!("ADC resolution {} bits", self.bits)));
        }
        if self.full_scale == 0 {
            return Err(Error::config("ADC full scale must be positive"));
        }
        Ok(())
    }

    /// Highest output code, `2^bits − 1`.
    pub fn max_code(&self) -> u32 {
        (1 << self.bits) - 1
    }

    /// Value of one code step as the fraction `(numerator, denominator)`.
    /// Ideal conversions have unit gain.
    pub fn gain(&self) -> (u64, u64) {
        match self.mode {
            AdcMode::Ideal => (1, 1),
            AdcMode::Quantized => (u64::from(self.full_scale), u64::from(self.max_code())),
        }
    }

    pub fn dequantize(&self, code: u32) -> f64 {
        let (num, den) = self.gain();
        f64::from(code) * num as f64 / den as f64
    }

    /// Largest dequantization error for sums within full scale.
    pub fn max_error(&self) -> f64 {
        match self.mode {
            AdcMode::Ideal => 0.0,
            AdcMode::Quantized => f64::from(self.full_scale) / (2.0 * f64::from(self.max_code())),
        }
    }
}

/// Digitizes one bitline sum.
pub fn adc_convert(sum: u32, model: &AdcModel) -> AdcReading {
    match model.mode {
        AdcMode::Ideal => AdcReading {
            code: sum,
            clipped: false,
        },
        AdcMode::Quantized => {
            let clipped = sum > model.full_scale;
            let s = u64::from(sum.min(model.full_scale));
            let fs = u64::from(model.full_scale);
            let levels = u64::from(model.max_code());
            // round(s × levels / fs), halves up
            let code = (2 * s * levels + fs) / (2 * fs);
            AdcReading {
                code: code as u32,
                clipped,
            }
        }
    }
}

/// One logical weight column after offline pre-alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrealignedColumn {
    /// Cell masks, one per slice, MSB first.
    pub slices: Vec<RowMask>,
    /// Shared weight exponent `E_w`.
    pub shared_exp: u8,
    /// Rows holding negative weights.
    pub signs: RowMask,
    /// Stored `w_s`-bit significands, one per row.
    pub stored: Vec<u64>,
}

/// Aligns a weight column to its largest exponent and slices it into
/// `w_s` binary cell columns. Stored significand of row `i` is
/// `floor(sig_i × 2^(w_s − 11 − (E_w − e_i)))`.
pub fn prealign_weights(column: &[Fp16Value], w_s: u32) -> Result<PrealignedColumn> {
    if column.len() > MACRO_ROWS {
        return Err(Error::config(format!(
            "weight column of {} rows exceeds {MACRO_ROWS}",
            column.len()
        )));
    }
    if !(1..=MAX_WEIGHT_WIDTH).contains(&w_s) {
        return Err(Error::config(format!(
            "weight width {w_s} outside [1, {MAX_WEIGHT_WIDTH}]"
        )));
    }
    if let Some((index, w)) = column.iter().enumerate().find(|(_, w)| !w.is_finite()) {
        return Err(Error::NonFinite {
            index,
            raw: w.to_bits(),
        });
    }
    let shared_exp = column
        .iter()
        .filter(|w| !w.is_zero())
        .map(|w| w.alignment_exponent())
        .max()
        .unwrap_or(0);

    let mut slices = vec![RowMask::EMPTY; w_s as usize];
    let mut signs = RowMask::EMPTY;
    let mut stored = Vec::with_capacity(column.len());
    for (row, w) in column.iter().enumerate() {
        let value = if w.is_zero() {
            0
        } else {
            let shift = i64::from(shared_exp - w.alignment_exponent());
            let up = i64::from(w_s) - i64::from(SIGNIFICAND_BITS) - shift;
            let sig = u64::from(w.significand());
            if up >= 0 {
                sig << up
            } else if up > -64 {
                sig >> -up
            } else {
                0
            }
        };
        if w.sign() && !w.is_zero() {
            signs.insert(row);
        }
        for (s, slice) in slices.iter_mut().enumerate() {
            if value >> (w_s as usize - 1 - s) & 1 == 1 {
                slice.insert(row);
            }
        }
        stored.push(value);
    }
    Ok(PrealignedColumn {
        slices,
        shared_exp,
        signs,
        stored,
    })
}

/// A programmed weight tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossbarTile {
    rows: usize,
    logical_cols: usize,
    w_s: u32,
    /// Indexed by `col * w_s + slice`.
    cells: Vec<RowMask>,
    signs: Vec<RowMask>,
    col_shared_exp: Vec<u8>,
}

impl CrossbarTile {
    /// Programs a tile from weight columns of equal length.
    pub fn new(columns: &[Vec<Fp16Value>], w_s: u32) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::config("weight columns differ in length"));
        }
        check_capacity(rows, columns.len(), w_s)?;
        let mut cells = Vec::with_capacity(columns.len() * w_s as usize);
        let mut signs = Vec::with_capacity(columns.len());
        let mut col_shared_exp = Vec::with_capacity(columns.len());
        for col in columns {
            let p = prealign_weights(col, w_s)?;
            cells.extend(p.slices);
            signs.push(p.signs);
            col_shared_exp.push(p.shared_exp);
        }
        Ok(Self {
            rows,
            logical_cols: columns.len(),
            w_s,
            cells,
            signs,
            col_shared_exp,
        })
    }

    /// Programs a tile from a row-major `rows × cols` weight matrix.
    pub fn from_row_major(weights: &[Fp16Value], rows: usize, cols: usize, w_s: u32) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: rows * cols,
            });
        }
        let columns: Vec<Vec<Fp16Value>> = (0..cols)
            .map(|c| (0..rows).map(|r| weights[r * cols + c]).collect())
            .collect();
        let mut tile = Self::new(&columns, w_s)?;
        tile.rows = rows;
        Ok(tile)
    }

    /// Reassembles a tile from raw cell contents.
    pub fn from_parts(
        rows: usize,
        logical_cols: usize,
        w_s: u32,
        cells: Vec<RowMask>,
        signs: Vec<RowMask>,
        col_shared_exp: Vec<u8>,
    ) -> Result<Self> {
        check_capacity(rows, logical_cols, w_s)?;
        if cells.len() != logical_cols * w_s as usize
            || signs.len() != logical_cols
            || col_shared_exp.len() != logical_cols
        {
            return Err(Error::config("tile parts disagree with the tile shape"));
        }
        let valid = RowMask::first(rows);
        if cells.iter().chain(&signs).any(|m| !(*m & !valid).is_empty()) {
            return Err(Error::config("cells set beyond the last row"));
        }
        if col_shared_exp.iter().any(|&e| e > 30) {
            return Err(Error::config("column exponent outside the finite range"));
        }
        Ok(Self {
            rows,
            logical_cols,
            w_s,
            cells,
            signs,
            col_shared_exp,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn logical_cols(&self) -> usize {
        self.logical_cols
    }

    pub fn physical_cols(&self) -> usize {
        self.logical_cols * self.w_s as usize
    }

    pub fn w_s(&self) -> u32 {
        self.w_s
    }

    pub fn col_shared_exp(&self, col: usize) -> u8 {
        self.col_shared_exp[col]
    }

    pub fn col_shared_exps(&self) -> &[u8] {
        &self.col_shared_exp
    }

    pub fn cells(&self) -> &[RowMask] {
        &self.cells
    }

    pub fn signs(&self) -> &[RowMask] {
        &self.signs
    }

    pub fn slice_mask(&self, col: usize, slice: usize) -> RowMask {
        self.cells[col * self.w_s as usize + slice]
    }

    pub fn sign_mask(&self, col: usize) -> RowMask {
        self.signs[col]
    }

    pub fn cell(&self, row: usize, col: usize, slice: usize) -> bool {
        self.slice_mask(col, slice).contains(row)
    }

    /// `Σ_s cell(row, col, s) × 2^(w_s − 1 − s)`.
    pub fn stored_significand(&self, row: usize, col: usize) -> u64 {
        (0..self.w_s as usize).fold(0, |acc, s| acc << 1 | u64::from(self.cell(row, col, s)))
    }

    /// Power-of-two exponent of one stored-significand unit in column `col`.
    pub fn weight_lsb_exponent(&self, col: usize) -> i32 {
        i32::from(self.col_shared_exp[col]) - EXPONENT_BIAS - (self.w_s as i32 - 1)
    }

    /// Exact value held by the cells of `(row, col)`.
    pub fn weight_value(&self, row: usize, col: usize) -> Dyadic {
        Dyadic::new(
            self.sign_mask(col).contains(row),
            u128::from(self.stored_significand(row, col)),
            self.weight_lsb_exponent(col),
        )
    }
}

fn check_capacity(rows: usize, logical_cols: usize, w_s: u32) -> Result<()> {
    if rows > MACRO_ROWS {
        return Err(Error::config(format!("{rows} rows exceed the {MACRO_ROWS} wordlines")));
    }
    if !(1..=MAX_WEIGHT_WIDTH).contains(&w_s) {
        return Err(Error::config(format!(
            "weight width {w_s} outside [1, {MAX_WEIGHT_WIDTH}]"
        )));
    }
    if rows * logical_cols * w_s as usize > MACRO_CELLS {
        return Err(Error::config(format!(
            "{rows} x {logical_cols} x {w_s} cells exceed the {MACRO_CELLS}-cell macro"
        )));
    }
    Ok(())
}

/// Per physical column bitline sums, split by product sign.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitlineSums {
    /// Index `col * w_s + slice`.
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

/// Sums of `input_bit × cell_bit` over `active` rows for every physical
/// column. Rows where input sign and weight sign differ feed the negative
/// stream.
pub fn bitline_cycle(tile: &CrossbarTile, active: RowMask, input_bits: RowMask, input_signs: RowMask) -> BitlineSums {
    let driven = active & input_bits;
    let mut sums = BitlineSums {
        positive: Vec::with_capacity(tile.physical_cols()),
        negative: Vec::with_capacity(tile.physical_cols()),
    };
    for col in 0..tile.logical_cols() {
        let flip = RowMask(input_signs.0 ^ tile.sign_mask(col).0);
        let pos_rows = driven & !flip;
        let neg_rows = driven & flip;
        for s in 0..tile.w_s() as usize {
            let cells = tile.slice_mask(col, s);
            sums.positive.push((pos_rows & cells).count());
            sums.negative.push((neg_rows & cells).count());
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(x: f64) -> Fp16Value {
        Fp16Value::from_f64(x)
    }

    #[test]
    fn prealign_examples() {
        let p = prealign_weights(&[f(1.0), f(2.0)], 11).unwrap();
        assert_eq!(p.shared_exp, 16);
        assert_eq!(p.stored, vec![512, 1024]);

        let p = prealign_weights(&[f(0.0)], 11).unwrap();
        assert_eq!(p.shared_exp, 0);
        assert!(p.slices.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn prealign_rejects_non_finite() {
        assert!(prealign_weights(&[Fp16Value::INFINITY], 11).is_err());
    }

    #[test]
    fn random_column_reconstructs_within_one_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let col: Vec<Fp16Value> = (0..128)
            .map(|_| loop {
                let v = Fp16Value::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let tile = CrossbarTile::new(std::slice::from_ref(&col), 11).unwrap();
        let unit = 2f64.powi(tile.weight_lsb_exponent(0));
        for (r, w) in col.iter().enumerate() {
            let stored = tile.weight_value(r, 0).to_f64();
            let exact = w.to_f64();
            assert!((stored - exact).abs() < unit, "row {r}: {stored} vs {exact}");
            assert!(stored.abs() <= exact.abs());
        }
    }

    #[test]
    fn slice_reconstruction_exhaustive_small() {
        // Every 11-bit significand with hidden bit, w_s = 11, no shift.
        for chunk in (1024u16..2048).collect::<Vec<_>>().chunks(128) {
            let col: Vec<_> = chunk
                .iter()
                .map(|&sig| Fp16Value::from_bits((15 << 10) | (sig & 0x3FF)))
                .collect();
            let tile = CrossbarTile::new(&[col], 11).unwrap();
            for (r, &sig) in chunk.iter().enumerate() {
                assert_eq!(tile.stored_significand(r, 0), u64::from(sig));
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let col = vec![Fp16Value::ONE; 128];
        assert!(CrossbarTile::new(&vec![col.clone(); 11], 11).is_ok());
        assert!(CrossbarTile::new(&vec![col.clone(); 12], 11).is_err());
        assert!(CrossbarTile::new(&[col], 0).is_err());
    }

    #[test]
    fn bitline_examples() {
        let tile = CrossbarTile::new(&[vec![Fp16Value::ONE; 4]], 11).unwrap();
        let sums = bitline_cycle(&tile, RowMask::EMPTY, RowMask::first(4), RowMask::EMPTY);
        assert!(sums.positive.iter().chain(&sums.negative).all(|&s| s == 0));

        let sums = bitline_cycle(&tile, RowMask::from_rows([0]), RowMask::from_rows([0]), RowMask::EMPTY);
        assert_eq!(sums.positive[0], 1);
        assert_eq!(sums.negative[0], 0);
    }

    fn random_tile(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CrossbarTile {
        let columns: Vec<Vec<Fp16Value>> = (0..cols)
            .map(|_| (0..rows).map(|_| f(rng.random_range(-4.0..4.0))).collect())
            .collect();
        CrossbarTile::new(&columns, 11).unwrap()
    }

    #[test]
    fn bitline_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tile = random_tile(&mut rng, 128, 4);
        for _ in 0..50 {
            let active = RowMask(rng.random());
            let bits = RowMask(rng.random());
            let signs = RowMask(rng.random());
            let sums = bitline_cycle(&tile, active, bits, signs);
            for col in 0..4 {
                for s in 0..11 {
                    let (mut pos, mut neg) = (0, 0);
                    for row in 0..128 {
                        if !active.contains(row) {
                            continue;
                        }
                        let x = u32::from(bits.contains(row)) * u32::from(tile.cell(row, col, s));
                        if signs.contains(row) == tile.sign_mask(col).contains(row) {
                            pos += x;
                        } else {
                            neg += x;
                        }
                    }
                    assert_eq!(sums.positive[col * 11 + s], pos);
                    assert_eq!(sums.negative[col * 11 + s], neg);
                    assert!(pos + neg <= active.count());
                }
            }
        }
    }

    #[test]
    fn bitline_additive_over_disjoint_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tile = random_tile(&mut rng, 128, 2);
        for _ in 0..50 {
            let a = RowMask(rng.random());
            let b = RowMask(rng.random()) & !a;
            let (bits, signs) = (RowMask(rng.random()), RowMask(rng.random()));
            let sa = bitline_cycle(&tile, a, bits, signs);
            let sb = bitline_cycle(&tile, b, bits, signs);
            let su = bitline_cycle(&tile, a | b, bits, signs);
            for i in 0..su.positive.len() {
                assert_eq!(su.positive[i], sa.positive[i] + sb.positive[i]);
                assert_eq!(su.negative[i], sa.negative[i] + sb.negative[i]);
            }
        }
    }

    #[test]
    fn adc_examples() {
        let q = AdcModel::quantized(6, 128);
        assert_eq!(adc_convert(0, &q).code, 0);
        assert_eq!(adc_convert(0, &AdcModel::default()).code, 0);
        let r = adc_convert(128, &q);
        assert_eq!((r.code, r.clipped), (63, false));
        assert_eq!(q.dequantize(r.code), 128.0);
        // code by the stated formula, then the half-step bound
        let r = adc_convert(47, &q);
        assert_eq!(r.code, (47.0f64 * 63.0 / 128.0).round() as u32);
        assert!((q.dequantize(r.code) - 47.0).abs() <= 128.0 / (2.0 * 63.0));
        assert!(adc_convert(129, &q).clipped);
        assert_eq!(adc_convert(500, &q).code, 63);
    }

    #[test]
    fn row_mask_basics() {
        let m = RowMask::from_rows([0, 5, 127]);
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![0, 5, 127]);
        assert_eq!(m.count(), 3);
        assert_eq!(RowMask::first(128).count(), 128);
        assert_eq!(RowMask::first(3), RowMask::from_rows([0, 1, 2]));
    }
}
