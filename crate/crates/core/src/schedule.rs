//! Wordline activation plans and bit-serial input cycle accounting.
//!
//! In-order activation drives every non-zero wordline in one phase, so all
//! inputs must share one alignment exponent. Dynamic wordline activation
//! (DWA) drives each exponent group in its own phase (near-max, center,
//! near-zero), letting each group keep its own shared exponent.

use serde::{Deserialize, Serialize};

use crate::alignment::WidthPolicy;
use crate::error::{Error, Result};
use crate::fpcodec::{Fp16Value, SIGNIFICAND_BITS};
use crate::sea::{classify_exponent, mea_max_exponent, shared_exponent, ExponentGroup, SeaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    InOrder,
    Dwa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Align every input to the global maximum exponent.
    #[default]
    Mea,
    /// Align each exponent group to its own shared exponent.
    Sea,
}

/// Which wordlines a phase drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseGroup {
    All,
    NearZero,
    Center,
    NearMax,
}

impl From<ExponentGroup> for PhaseGroup {
    fn from(g: ExponentGroup) -> Self {
        match g {
            ExponentGroup::NearZero => PhaseGroup::NearZero,
            ExponentGroup::Center => PhaseGroup::Center,
            ExponentGroup::NearMax => PhaseGroup::NearMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub group: PhaseGroup,
    pub wordlines: Vec<usize>,
    /// Exponent code every wordline of the phase is aligned to.
    pub shared_exponent: u8,
    /// Extra register width `M_d` (0 for fixed-width input).
    pub extra_width: u32,
    /// Serial bit cycles, `11 + M_d`.
    pub cycles: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    pub skip_nearzero: bool,
    /// Wordlines never driven (zero inputs, plus the near-zero group when
    /// it is skipped).
    pub skipped_rows: usize,
}

impl Schedule {
    pub fn input_cycles(&self) -> u64 {
        self.phases.iter().map(|p| u64::from(p.cycles)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }
}

/// Everything that determines a schedule besides the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SchedulePlan {
    pub activation: Activation,
    pub alignment: AlignmentMode,
    pub sea: SeaConfig,
    pub width: WidthPolicy,
    /// Drop the whole near-zero group (DWA only).
    pub skip_nearzero: bool,
}

/// Builds the activation schedule for one macro call. Zero inputs are never
/// driven.
pub fn plan_schedule(inputs: &[Fp16Value], plan: &SchedulePlan) -> Result<Schedule> {
    if let Some((index, v)) = inputs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            raw: v.to_bits(),
        });
    }
    plan.sea.validate()?;
    let skip_nearzero = plan.skip_nearzero && plan.activation == Activation::Dwa;

    let mut groups: [Vec<usize>; 3] = Default::default();
    let mut skipped_rows = 0;
    for (row, v) in inputs.iter().enumerate() {
        let group = classify_exponent(v.exponent());
        if v.is_zero() || (skip_nearzero && group == ExponentGroup::NearZero) {
            skipped_rows += 1;
        } else {
            groups[group.index()].push(row);
        }
    }
    let exponents = |rows: &[usize]| -> Vec<u8> { rows.iter().map(|&r| inputs[r].exponent()).collect() };
    let group_shared = |g: ExponentGroup| shared_exponent(g, &exponents(&groups[g.index()]), &plan.sea);

    let all_active: Vec<usize> = {
        let mut rows: Vec<usize> = groups.iter().flatten().copied().collect();
        rows.sort_unstable();
        rows
    };
    if all_active.is_empty() {
        return Ok(Schedule {
            phases: Vec::new(),
            skip_nearzero,
            skipped_rows,
        });
    }
    let global_max = || mea_max_exponent(&exponents(&all_active)).map(|t| t.max);

    let mut phases = Vec::new();
    match plan.activation {
        Activation::InOrder => {
            let shared = match plan.alignment {
                AlignmentMode::Mea => global_max()?,
                AlignmentMode::Sea => {
                    // One phase means one accumulation scale: the highest
                    // shared exponent among the populated groups.
                    let mut top = 0;
                    for g in ExponentGroup::ALL {
                        if !groups[g.index()].is_empty() {
                            top = top.max(group_shared(g)?);
                        }
                    }
                    top
                }
            };
            phases.push(make_phase(PhaseGroup::All, all_active, shared, inputs, plan.width));
        }
        Activation::Dwa => {
            let global = match plan.alignment {
                AlignmentMode::Mea => Some(global_max()?),
                AlignmentMode::Sea => None,
            };
            for g in [ExponentGroup::NearMax, ExponentGroup::Center, ExponentGroup::NearZero] {
                let rows = &groups[g.index()];
                if rows.is_empty() {
                    continue;
                }
                let shared = match global {
                    Some(e) => e,
                    None => group_shared(g)?,
                };
                phases.push(make_phase(g.into(), rows.clone(), shared, inputs, plan.width));
            }
        }
    }
    Ok(Schedule {
        phases,
        skip_nearzero,
        skipped_rows,
    })
}

fn make_phase(
    group: PhaseGroup,
    wordlines: Vec<usize>,
    shared_exponent: u8,
    inputs: &[Fp16Value],
    width: WidthPolicy,
) -> Phase {
    let max_shift = wordlines
        .iter()
        .map(|&r| u32::from(shared_exponent.saturating_sub(inputs[r].exponent())))
        .max()
        .unwrap_or(0);
    let extra_width = width.extra_width(max_shift);
    Phase {
        group,
        wordlines,
        shared_exponent,
        extra_width,
        cycles: SIGNIFICAND_BITS + extra_width,
    }
}

/// Conventional schedule: maximum-exponent alignment, one phase.
pub fn schedule_inorder(inputs: &[Fp16Value], width: WidthPolicy) -> Result<Schedule> {
    plan_schedule(
        inputs,
        &SchedulePlan {
            activation: Activation::InOrder,
            alignment: AlignmentMode::Mea,
            width,
            ..SchedulePlan::default()
        },
    )
}

/// Segmented alignment with one phase per populated exponent group.
pub fn schedule_dwa(
    inputs: &[Fp16Value],
    config: &SeaConfig,
    width: WidthPolicy,
    skip_nearzero: bool,
) -> Result<Schedule> {
    plan_schedule(
        inputs,
        &SchedulePlan {
            activation: Activation::Dwa,
            alignment: AlignmentMode::Sea,
            sea: *config,
            width,
            skip_nearzero,
        },
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub input_cycles: u64,
    pub phases: usize,
    pub skipped_rows: usize,
    /// Serial cycles times the column multiplexing ratio of the ADCs.
    pub adc_conversion_cycles: u64,
    pub baseline: Option<String>,
    pub reduction_vs_baseline: Option<f64>,
}

impl CycleReport {
    pub fn from_schedule(schedule: &Schedule, mux_ratio: u32) -> Self {
        let input_cycles = schedule.input_cycles();
        Self {
            input_cycles,
            phases: schedule.phases.len(),
            skipped_rows: schedule.skipped_rows,
            adc_conversion_cycles: input_cycles * u64::from(mux_ratio),
            baseline: None,
            reduction_vs_baseline: None,
        }
    }

    /// Records the reduction relative to `baseline` under `label`.
    pub fn against(mut self, label: &str, baseline: &CycleReport) -> Result<Self> {
        self.reduction_vs_baseline = Some(compare_latency(&self, baseline)?);
        self.baseline = Some(label.to_owned());
        Ok(self)
    }
}

/// `(b − a) / b` in input cycles.
pub fn compare_latency(a: &CycleReport, b: &CycleReport) -> Result<f64> {
    cycle_reduction(a.input_cycles, b.input_cycles)
}

pub fn cycle_reduction(cycles: u64, baseline: u64) -> Result<f64> {
    if baseline == 0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((baseline as f64 - cycles as f64) / baseline as f64)
}
