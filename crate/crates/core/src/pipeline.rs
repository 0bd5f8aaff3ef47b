//! The macro datapath: preprocessing, bit-serial crossbar MAC with
//! shift-and-add accumulation, exponent adder and normalizer.
//!
//! A phase drives its wordlines MSB first. Every cycle each physical column
//! produces a positive and a negative bitline sum, both go through the ADC,
//! and the codes are accumulated with weight
//! `2^(cycle position) × 2^(w_s − 1 − slice)`. Partial sums stay separate per
//! phase; the normalizer combines them exactly and rounds once.

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_input, AlignedInput, DwiScope, WidthPolicy};
use crate::crossbar::{adc_convert, AdcMode, AdcModel, CrossbarTile, RowMask, MACRO_ROWS, MAX_WEIGHT_WIDTH};
use crate::error::{Error, Result};
use crate::fpcodec::{encode_ratio, Fp16Value, EXPONENT_BIAS, SIGNIFICAND_BITS};
use crate::schedule::{plan_schedule, Activation, AlignmentMode, CycleReport, PhaseGroup, Schedule, SchedulePlan};
use crate::sea::{classify_exponent, mea_shift, sea_shift, SeaConfig};

/// Largest explicit `M_d` accepted; automatic sizing never exceeds 31.
pub const MAX_EXTRA_WIDTH: u32 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroConfig {
    pub rows: usize,
    pub adc: AdcModel,
    pub width: WidthPolicy,
    /// Sizing of `Dwi { m_d: None }` when a whole layer is evaluated.
    pub dwi_scope: DwiScope,
    pub alignment: AlignmentMode,
    pub activation: Activation,
    pub sea: SeaConfig,
    pub skip_nearzero: bool,
    /// Weight significand width used when programming tiles.
    pub w_s: u32,
    /// Signed width of each accumulator stream.
    pub accumulator_width: u32,
    /// Input bits driven per wordline per cycle.
    pub dac_bits: u32,
    /// Bitline columns sharing one ADC.
    pub mux_ratio: u32,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            rows: MACRO_ROWS,
            adc: AdcModel::default(),
            width: WidthPolicy::Fwi,
            dwi_scope: DwiScope::Call,
            alignment: AlignmentMode::Sea,
            activation: Activation::Dwa,
            sea: SeaConfig::default(),
            skip_nearzero: false,
            w_s: SIGNIFICAND_BITS,
            accumulator_width: 64,
            dac_bits: 1,
            mux_ratio: 16,
        }
    }
}

impl MacroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.rows > MACRO_ROWS {
            return Err(Error::config(format!("rows = {} outside [1, {MACRO_ROWS}]", self.rows)));
        }
        if !(1..=MAX_WEIGHT_WIDTH).contains(&self.w_s) {
            return Err(Error::config(format!(
                "w_s = {} outside [1, {MAX_WEIGHT_WIDTH}]",
                self.w_s
            )));
        }
        if !(1..=8).contains(&self.dac_bits) {
            return Err(Error::config(format!("dac_bits = {} outside [1, 8]", self.dac_bits)));
        }
        if !(2..=128).contains(&self.accumulator_width) {
            return Err(Error::config("accumulator_width outside [2, 128]"));
        }
        if self.mux_ratio == 0 {
            return Err(Error::config("mux_ratio must be positive"));
        }
        if let WidthPolicy::Dwi { m_d: Some(m_d) } = self.width {
            if m_d > MAX_EXTRA_WIDTH {
                return Err(Error::config(format!("m_d = {m_d} exceeds {MAX_EXTRA_WIDTH}")));
            }
        }
        self.adc.validate()?;
        self.sea.validate()
    }

    pub fn schedule_plan(&self) -> SchedulePlan {
        SchedulePlan {
            activation: self.activation,
            alignment: self.alignment,
            sea: self.sea,
            width: self.width,
            skip_nearzero: self.skip_nearzero,
        }
    }
}

/// Inputs as loaded into the input registers, plus the activation plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preprocessed {
    /// One entry per wordline; rows that are never driven hold 0.
    pub aligned: Vec<AlignedInput>,
    pub schedule: Schedule,
    /// Inputs whose exponent exceeded a static shared exponent.
    pub clamp_events: u32,
}

impl Preprocessed {
    pub fn dropped_bits(&self) -> u64 {
        self.aligned.iter().map(|a| u64::from(a.dropped_bits)).sum()
    }
}

pub fn preprocess(inputs: &[Fp16Value], config: &MacroConfig) -> Result<Preprocessed> {
    config.validate()?;
    if inputs.len() > config.rows {
        return Err(Error::config(format!(
            "{} inputs for {} wordlines",
            inputs.len(),
            config.rows
        )));
    }
    let schedule = plan_schedule(inputs, &config.schedule_plan())?;
    let mut aligned: Vec<AlignedInput> = inputs
        .iter()
        .map(|v| AlignedInput {
            sign: v.sign(),
            group_flag: classify_exponent(v.exponent()).flag(),
            width: SIGNIFICAND_BITS,
            ..AlignedInput::default()
        })
        .collect();
    let mut clamp_events = 0;
    for phase in &schedule.phases {
        let target = phase.shared_exponent.max(1);
        for &row in &phase.wordlines {
            let v = inputs[row];
            let e = v.alignment_exponent();
            let shift = match config.alignment {
                AlignmentMode::Mea => mea_shift(e, target)?,
                AlignmentMode::Sea => {
                    let s = sea_shift(e, target, config.sea.shift_cap);
                    clamp_events += u32::from(s.clamped);
                    // Beyond the cap the whole significand is shifted out.
                    let raw = u32::from(target.saturating_sub(e));
                    if raw > s.shift {
                        SIGNIFICAND_BITS + phase.extra_width
                    } else {
                        s.shift
                    }
                }
            };
            aligned[row] = align_input(v, shift, phase.extra_width, aligned[row].group_flag)?;
        }
    }
    Ok(Preprocessed {
        aligned,
        schedule,
        clamp_events,
    })
}

/// One phase's accumulated partial sum for one logical column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSumRegister {
    pub group: PhaseGroup,
    /// Accumulated ADC codes of the positive-product stream.
    pub positive: i128,
    pub negative: i128,
    /// Shared input exponent `E_g` of the phase.
    pub input_exponent: u8,
    /// Shared weight exponent `E_w` of the column.
    pub weight_exponent: u8,
    /// Power-of-two weight of one accumulator unit.
    pub scale_exponent: i32,
}

impl PartialSumRegister {
    pub fn accumulator(&self) -> i128 {
        self.positive - self.negative
    }
}

/// Scale of one accumulator LSB: `(e_g − 15) + (e_w − 15) − (input_width − 1)
/// − (weight_width − 1)`.
pub fn exponent_add(e_g: u8, e_w: u8, input_width: u32, weight_width: u32) -> i32 {
    i32::from(e_g) - EXPONENT_BIAS + i32::from(e_w)
        - EXPONENT_BIAS
        - (input_width as i32 - 1)
        - (weight_width as i32 - 1)
}

/// Combines partial sums exactly and rounds once to FP16. `gain` is the ADC
/// code step as `(numerator, denominator)`.
pub fn normalize(partials: &[PartialSumRegister], gain: (u64, u64)) -> Fp16Value {
    let Some(base) = partials.iter().map(|p| p.scale_exponent).min() else {
        return Fp16Value::ZERO;
    };
    let mut total = BigInt::from(0);
    for p in partials {
        total += BigInt::from(p.accumulator()) << (p.scale_exponent - base) as u32;
    }
    total *= gain.0;
    Fp16Value::from_bits(encode_ratio(&total, gain.1, base))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacOutcome {
    /// One result per logical column.
    pub outputs: Vec<Fp16Value>,
    pub cycles: CycleReport,
    pub preprocessed: Preprocessed,
    /// Per column, one register per phase.
    pub partials: Vec<Vec<PartialSumRegister>>,
    pub clip_events: u64,
    /// Some accumulator stream reached the configured width.
    pub overflow: bool,
}

impl MacOutcome {
    pub fn dropped_bits(&self) -> u64 {
        self.preprocessed.dropped_bits()
    }

    pub fn clamp_events(&self) -> u32 {
        self.preprocessed.clamp_events
    }
}

/// Runs one matrix-vector product through the macro. `inputs` must have one
/// entry per tile row. The tile's own `w_s` is used.
pub fn run_mac(inputs: &[Fp16Value], tile: &CrossbarTile, config: &MacroConfig) -> Result<MacOutcome> {
    if inputs.len() != tile.rows() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: tile.rows(),
        });
    }
    let pre = preprocess(inputs, config)?;
    let w_s = tile.w_s() as usize;
    // `None` when the stream can never reach the configured width.
    let limit = (config.accumulator_width < 128).then(|| 1i128 << (config.accumulator_width - 1));
    let dac = config.dac_bits;

    let negative_inputs = RowMask::from_rows(inputs.iter().enumerate().filter(|(_, v)| v.sign()).map(|(r, _)| r));
    let mut partials = vec![Vec::with_capacity(pre.schedule.phases.len()); tile.logical_cols()];
    let mut clip_events = 0u64;
    let mut overflow = false;
    let mut input_cycles = 0u64;

    for phase in &pre.schedule.phases {
        let active = RowMask::from_rows(phase.wordlines.iter().copied());
        let input_width = SIGNIFICAND_BITS + phase.extra_width;
        let digits = input_width.div_ceil(dac);
        input_cycles += u64::from(digits);
        let code_bits = match config.adc.mode {
            AdcMode::Ideal => 7 + dac,
            AdcMode::Quantized => config.adc.bits,
        };
        if code_bits + digits * dac + tile.w_s() > 126 {
            return Err(Error::config(format!(
                "{input_width}-bit inputs with {}-bit weights exceed the 128-bit accumulator",
                tile.w_s()
            )));
        }

        // Bit planes of the input registers, LSB first.
        let mut planes = vec![RowMask::EMPTY; (digits * dac) as usize];
        for &row in &phase.wordlines {
            let mut sig = pre.aligned[row].significand;
            while sig != 0 {
                let b = sig.trailing_zeros() as usize;
                planes[b].insert(row);
                sig &= sig - 1;
            }
        }

        for (col, regs) in partials.iter_mut().enumerate() {
            let flip = RowMask(negative_inputs.0 ^ tile.sign_mask(col).0);
            let streams = [active & !flip, active & flip];
            let mut acc = [0i128; 2];
            for digit in (0..digits).rev() {
                let digit_shift = digit * dac;
                for s in 0..w_s {
                    let cells = tile.slice_mask(col, s);
                    let place = digit_shift + (w_s - 1 - s) as u32;
                    for (stream, rows) in streams.iter().enumerate() {
                        let driven = *rows & cells;
                        if driven.is_empty() {
                            continue;
                        }
                        let mut sum = 0u32;
                        for j in 0..dac {
                            let plane = planes[(digit_shift + j) as usize];
                            sum += (plane & driven).count() << j;
                        }
                        let reading = adc_convert(sum, &config.adc);
                        clip_events += u64::from(reading.clipped);
                        acc[stream] += i128::from(reading.code) << place;
                    }
                }
            }
            overflow |= limit.is_some_and(|l| acc.iter().any(|&a| a >= l));
            let e_g = phase.shared_exponent.max(1);
            let e_w = tile.col_shared_exp(col);
            regs.push(PartialSumRegister {
                group: phase.group,
                positive: acc[0],
                negative: acc[1],
                input_exponent: e_g,
                weight_exponent: e_w,
                scale_exponent: exponent_add(e_g, e_w, input_width, tile.w_s()),
            });
        }
    }

    let gain = config.adc.gain();
    let outputs = partials.iter().map(|regs| normalize(regs, gain)).collect();
    let mut cycles = CycleReport::from_schedule(&pre.schedule, config.mux_ratio);
    cycles.input_cycles = input_cycles;
    cycles.adc_conversion_cycles = input_cycles * u64::from(config.mux_ratio);
    Ok(MacOutcome {
        outputs,
        cycles,
        preprocessed: pre,
        partials,
        clip_events,
        overflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::AdcModel;
    use crate::fpcodec::exact_dot;
    use crate::sea::SeaConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(x: f64) -> Fp16Value {
        Fp16Value::from_f64(x)
    }

    fn exact_config(alignment: AlignmentMode, activation: Activation, sea: SeaConfig) -> MacroConfig {
        MacroConfig {
            alignment,
            activation,
            sea,
            width: WidthPolicy::dwi_auto(),
            adc: AdcModel::default(),
            accumulator_width: 128,
            ..MacroConfig::default()
        }
    }

    #[test]
    fn preprocess_examples() {
        let cfg = MacroConfig::default();
        let p = preprocess(&[Fp16Value::ZERO; 4], &cfg).unwrap();
        assert!(p.schedule.phases.is_empty());
        assert!(p.aligned.iter().all(|a| a.significand == 0));

        let p = preprocess(&[Fp16Value::ONE], &cfg).unwrap();
        assert_eq!(p.aligned[0].shift_applied, 8);
        assert_eq!(p.aligned[0].significand, 4);
        assert_eq!(p.aligned[0].group_flag, crate::sea::ExponentGroup::Center.flag());

        let dynamic = MacroConfig {
            sea: SeaConfig::dynamic(),
            ..cfg
        };
        let p = preprocess(&[Fp16Value::ONE], &dynamic).unwrap();
        assert_eq!((p.aligned[0].shift_applied, p.aligned[0].significand), (0, 1024));

        assert!(preprocess(&[Fp16Value::INFINITY], &cfg).is_err());
        assert!(preprocess(&[Fp16Value::ONE; 129], &cfg).is_err());
    }

    #[test]
    fn shifts_beyond_cap_flush_to_zero() {
        let cfg = MacroConfig {
            sea: SeaConfig {
                shift_cap: 4,
                ..SeaConfig::default()
            },
            ..MacroConfig::default()
        };
        let p = preprocess(&[Fp16Value::ONE, f(2f64.powi(8))], &cfg).unwrap();
        assert_eq!((p.aligned[0].significand, p.aligned[0].dropped_bits), (0, 1));
        assert_eq!(p.aligned[1].significand, 1024);
    }

    #[test]
    fn exponent_add_examples() {
        assert_eq!(exponent_add(15, 15, 11, 11), -20);
        assert_eq!(exponent_add(16, 15, 11, 11), -19);
    }

    #[test]
    fn normalize_examples() {
        let reg = |acc: i128, scale| PartialSumRegister {
            group: PhaseGroup::All,
            positive: acc.max(0),
            negative: (-acc).max(0),
            input_exponent: 15,
            weight_exponent: 15,
            scale_exponent: scale,
        };
        assert_eq!(normalize(&[reg(1 << 20, -20)], (1, 1)), Fp16Value::ONE);
        assert_eq!(normalize(&[reg(12345, -3), reg(-12345, -3)], (1, 1)).to_bits(), 0x0000);
        assert_eq!(normalize(&[], (1, 1)).to_bits(), 0x0000);
        // 3 + 0.5 + 2^-30 rounds to 3.5
        let got = normalize(&[reg(3, 0), reg(1, -1), reg(1, -30)], (1, 1));
        assert_eq!(got.to_f64(), 3.5);
        // 63 codes at gain 128/63 is exactly 128
        assert_eq!(normalize(&[reg(63, 0)], (128, 63)).to_f64(), 128.0);
    }

    #[test]
    fn normalize_three_random_partials_matches_bigint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let parts: Vec<PartialSumRegister> = (0..3)
                .map(|_| {
                    let acc: i64 = rng.random_range(-(1 << 40)..(1 << 40));
                    PartialSumRegister {
                        group: PhaseGroup::All,
                        positive: i128::from(acc.max(0)),
                        negative: i128::from((-acc).max(0)),
                        input_exponent: 0,
                        weight_exponent: 0,
                        scale_exponent: rng.random_range(-60..-20),
                    }
                })
                .collect();
            let base = parts.iter().map(|p| p.scale_exponent).min().unwrap();
            let sum: BigInt = parts
                .iter()
                .map(|p| BigInt::from(p.accumulator()) << (p.scale_exponent - base + 8) as u32)
                .sum();
            let want = crate::fpcodec::encode_big(&sum, base - 8);
            assert_eq!(normalize(&parts, (1, 1)).to_bits(), want);
        }
    }

    #[test]
    fn run_mac_examples() {
        let tile = CrossbarTile::new(&[vec![f(2.0)]], 11).unwrap();
        let cfg = exact_config(AlignmentMode::Sea, Activation::Dwa, SeaConfig::dynamic());
        let out = run_mac(&[Fp16Value::ONE], &tile, &cfg).unwrap();
        assert_eq!(out.outputs[0].to_bits(), 0x4000);

        let tile = CrossbarTile::new(&vec![vec![f(0.5); 128]; 4], 11).unwrap();
        let out = run_mac(&[Fp16Value::ZERO; 128], &tile, &MacroConfig::default()).unwrap();
        assert!(out.outputs.iter().all(|o| o.to_bits() == 0));
        assert_eq!(out.cycles.input_cycles, 0);

        assert!(run_mac(&[Fp16Value::ONE; 3], &tile, &MacroConfig::default()).is_err());
    }

    fn random_finite(rng: &mut ChaCha8Rng) -> Fp16Value {
        loop {
            let v = Fp16Value::from_bits(rng.random());
            if v.is_finite() {
                return v;
            }
        }
    }

    #[test]
    fn every_strategy_is_exact_with_lossless_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let configs = [
            exact_config(AlignmentMode::Mea, Activation::InOrder, SeaConfig::default()),
            exact_config(AlignmentMode::Mea, Activation::Dwa, SeaConfig::default()),
            exact_config(AlignmentMode::Sea, Activation::InOrder, SeaConfig::default()),
            exact_config(AlignmentMode::Sea, Activation::Dwa, SeaConfig::default()),
            exact_config(AlignmentMode::Sea, Activation::InOrder, SeaConfig::dynamic()),
            exact_config(AlignmentMode::Sea, Activation::Dwa, SeaConfig::dynamic()),
        ];
        for _ in 0..40 {
            let inputs: Vec<_> = (0..128).map(|_| random_finite(&mut rng)).collect();
            let columns: Vec<Vec<_>> = (0..3)
                .map(|_| (0..128).map(|_| random_finite(&mut rng)).collect())
                .collect();
            let tile = CrossbarTile::new(&columns, 40).unwrap();
            let want: Vec<u16> = columns
                .iter()
                .map(|c| exact_dot(&inputs, c).unwrap().to_fp16().to_bits())
                .collect();
            for cfg in &configs {
                let out = run_mac(&inputs, &tile, cfg).unwrap();
                let got: Vec<u16> = out.outputs.iter().map(|o| o.to_bits()).collect();
                assert_eq!(
                    got, want,
                    "{:?}/{:?}/{:?}",
                    cfg.alignment, cfg.activation, cfg.sea.policy
                );
                assert_eq!(out.dropped_bits(), 0);
                assert!(!out.overflow);
            }
        }
    }

    #[test]
    fn multi_bit_dac_matches_single_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<_> = (0..128).map(|_| f(rng.random_range(-2.0..2.0))).collect();
        let cols: Vec<Vec<_>> = (0..2)
            .map(|_| (0..128).map(|_| f(rng.random_range(-1.0..1.0))).collect())
            .collect();
        let tile = CrossbarTile::new(&cols, 11).unwrap();
        let one = run_mac(&inputs, &tile, &MacroConfig::default()).unwrap();
        let cfg = MacroConfig {
            dac_bits: 4,
            ..MacroConfig::default()
        };
        let four = run_mac(&inputs, &tile, &cfg).unwrap();
        assert_eq!(one.outputs, four.outputs);
        assert!(four.cycles.input_cycles < one.cycles.input_cycles);
    }

    #[test]
    fn quantized_adc_error_within_conversion_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<_> = (0..128).map(|_| f(rng.random_range(0.5..1.0))).collect();
        let col: Vec<_> = (0..128).map(|_| f(rng.random_range(-1.0..1.0))).collect();
        let tile = CrossbarTile::new(std::slice::from_ref(&col), 11).unwrap();
        let adc = AdcModel::quantized(6, 128);
        let cfg = MacroConfig {
            adc,
            sea: SeaConfig::dynamic(),
            ..MacroConfig::default()
        };
        let out = run_mac(&inputs, &tile, &cfg).unwrap();
        assert_eq!(out.clip_events, 0);
        let ideal = run_mac(
            &inputs,
            &tile,
            &MacroConfig {
                adc: AdcModel::default(),
                ..cfg
            },
        )
        .unwrap();
        // Each conversion is off by at most half a code step; the worst case
        // weights every (cycle, slice) position in both streams.
        let scale = 2f64.powi(out.partials[0][0].scale_exponent);
        let per_stream = f64::from((1u32 << 11) - 1).powi(2);
        let bound = 2.0 * adc.max_error() * per_stream * scale;
        let err = (out.outputs[0].to_f64() - ideal.outputs[0].to_f64()).abs();
        let half_ulp = ideal.outputs[0].to_f64().abs() * 2f64.powi(-10);
        assert!(err > 0.0);
        assert!(err <= bound + 2.0 * half_ulp, "err {err} bound {bound}");
    }
}
