//! Strategy comparisons over synthetic or loaded workloads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::{DwiScope, WidthPolicy};
use crate::analysis::{error_stats, BimodalSampler, BimodalSpec, ErrorReport};
use crate::crossbar::CrossbarTile;
use crate::error::{Error, Result};
use crate::fpcodec::{exact_dot, ExactAccumulator, Fp16Value};
use crate::pipeline::{run_mac, MacroConfig};
use crate::schedule::{cycle_reduction, plan_schedule, Activation, AlignmentMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "mea-dwi")]
    MeaDwi,
    #[serde(rename = "mea-fwi")]
    MeaFwi,
    #[serde(rename = "sea-dwa-fwi")]
    SeaDwaFwi,
    #[serde(rename = "sea-dwa-dwi")]
    SeaDwaDwi,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::MeaDwi, Self::MeaFwi, Self::SeaDwaFwi, Self::SeaDwaDwi];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MeaDwi => "mea-dwi",
            Strategy::MeaFwi => "mea-fwi",
            Strategy::SeaDwaFwi => "sea-dwa-fwi",
            Strategy::SeaDwaDwi => "sea-dwa-dwi",
        }
    }

    /// `base` with alignment, activation and width replaced. DWI keeps an
    /// explicit `m_d` from `base` and is otherwise sized automatically.
    pub fn apply(self, base: &MacroConfig) -> MacroConfig {
        let dwi = match base.width {
            w @ WidthPolicy::Dwi { .. } => w,
            WidthPolicy::Fwi => WidthPolicy::dwi_auto(),
        };
        let (alignment, activation, width) = match self {
            Strategy::MeaDwi => (AlignmentMode::Mea, Activation::InOrder, dwi),
            Strategy::MeaFwi => (AlignmentMode::Mea, Activation::InOrder, WidthPolicy::Fwi),
            Strategy::SeaDwaFwi => (AlignmentMode::Sea, Activation::Dwa, WidthPolicy::Fwi),
            Strategy::SeaDwaDwi => (AlignmentMode::Sea, Activation::Dwa, dwi),
        };
        MacroConfig {
            alignment,
            activation,
            width,
            ..*base
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

/// Input vectors for successive macro calls against one weight tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub name: String,
    pub calls: Vec<Vec<Fp16Value>>,
    pub columns: Vec<Vec<Fp16Value>>,
    pub tile: CrossbarTile,
}

/// Standard deviation of the synthetic weights.
pub const WEIGHT_SIGMA: f64 = 0.125;

/// Seed offset separating the weight stream from the input stream.
const WEIGHT_STREAM: u64 = 0x5745_4947_4854;

pub fn synthetic_weights(seed: u64, rows: usize, cols: usize) -> Vec<Vec<Fp16Value>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ WEIGHT_STREAM);
    let normal = Normal::new(0.0, WEIGHT_SIGMA).expect("valid sigma");
    (0..cols)
        .map(|_| {
            (0..rows)
                .map(|_| Fp16Value::from_f64(normal.sample(&mut rng)))
                .collect()
        })
        .collect()
}

impl Workload {
    /// `calls` input vectors of `rows` values from `spec`, and `cols`
    /// normally distributed weight columns.
    pub fn synthetic(spec: &BimodalSpec, calls: usize, rows: usize, cols: usize, w_s: u32) -> Result<Self> {
        let mut sampler = BimodalSampler::new(spec)?;
        let calls = (0..calls).map(|_| sampler.sample(rows)).collect();
        let columns = synthetic_weights(spec.seed, rows, cols);
        let tile = CrossbarTile::new(&columns, w_s)?;
        Ok(Self {
            name: "synthetic".into(),
            calls,
            columns,
            tile,
        })
    }

    /// Splits a flat activation tensor into calls of `rows` values; the last
    /// call is zero-padded.
    pub fn from_activations(
        name: impl Into<String>,
        values: &[Fp16Value],
        columns: Vec<Vec<Fp16Value>>,
        w_s: u32,
    ) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if rows == 0 {
            return Err(Error::config("weight tile has no rows"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                raw: values[i].to_bits(),
            });
        }
        let calls = values
            .chunks(rows)
            .map(|c| {
                let mut v = c.to_vec();
                v.resize(rows, Fp16Value::ZERO);
                v
            })
            .collect();
        let tile = CrossbarTile::new(&columns, w_s)?;
        Ok(Self {
            name: name.into(),
            calls,
            columns,
            tile,
        })
    }

    pub fn oracle(&self) -> Result<Vec<Vec<ExactAccumulator>>> {
        self.calls
            .iter()
            .map(|x| self.columns.iter().map(|w| exact_dot(x, w)).collect())
            .collect()
    }
}

/// `config` with an automatically sized DWI register fixed to the widest
/// phase over all `calls`, when its scope is [`DwiScope::Layer`].
pub fn size_for_layer(calls: &[Vec<Fp16Value>], config: &MacroConfig) -> Result<MacroConfig> {
    if config.width != WidthPolicy::dwi_auto() || config.dwi_scope == DwiScope::Call {
        return Ok(*config);
    }
    let plan = config.schedule_plan();
    let mut m_d = 0;
    for x in calls {
        for phase in plan_schedule(x, &plan)?.phases {
            m_d = m_d.max(phase.extra_width);
        }
    }
    Ok(MacroConfig {
        width: WidthPolicy::Dwi { m_d: Some(m_d) },
        ..*config
    })
}

/// Input cycles per call under the schedule cycle model.
pub fn schedule_cycles(calls: &[Vec<Fp16Value>], config: &MacroConfig) -> Result<Vec<u64>> {
    let plan = size_for_layer(calls, config)?.schedule_plan();
    calls
        .iter()
        .map(|x| Ok(plan_schedule(x, &plan)?.input_cycles()))
        .collect()
}

/// Mean of the per-call reductions `(b − a) / b`, skipping calls where the
/// baseline needs no cycles. `None` when every call is skipped.
pub fn mean_reduction(cycles: &[u64], baseline: &[u64]) -> Result<Option<f64>> {
    if cycles.len() != baseline.len() {
        return Err(Error::LengthMismatch {
            left: cycles.len(),
            right: baseline.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&a, &b) in cycles.iter().zip(baseline) {
        if b > 0 {
            sum += cycle_reduction(a, b)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub calls: usize,
    pub total_cycles: u64,
    #[serde(skip)]
    pub cycles_per_call: Vec<u64>,
    pub clip_events: u64,
    pub clamp_events: u64,
    pub overflow_calls: usize,
    pub errors: ErrorReport,
}

impl StrategyResult {
    pub fn reduction_vs(&self, baseline: &StrategyResult) -> Result<Option<f64>> {
        mean_reduction(&self.cycles_per_call, &baseline.cycles_per_call)
    }
}

/// Runs every call of `workload` through the macro under `strategy`.
/// `oracle` is [`Workload::oracle`].
pub fn evaluate(
    strategy: Strategy,
    workload: &Workload,
    oracle: &[Vec<ExactAccumulator>],
    base: &MacroConfig,
) -> Result<StrategyResult> {
    let config = size_for_layer(&workload.calls, &strategy.apply(base))?;
    let mut result = StrategyResult {
        strategy,
        calls: workload.calls.len(),
        total_cycles: 0,
        cycles_per_call: Vec::with_capacity(workload.calls.len()),
        clip_events: 0,
        clamp_events: 0,
        overflow_calls: 0,
        errors: ErrorReport::default(),
    };
    let mut reports = Vec::with_capacity(workload.calls.len());
    for (x, want) in workload.calls.iter().zip(oracle) {
        let out = run_mac(x, &workload.tile, &config)?;
        result.total_cycles += out.cycles.input_cycles;
        result.cycles_per_call.push(out.cycles.input_cycles);
        result.clip_events += out.clip_events;
        result.clamp_events += u64::from(out.clamp_events());
        result.overflow_calls += usize::from(out.overflow);
        reports.push(error_stats(&out.outputs, want)?.with_dropped_bits(out.dropped_bits()));
    }
    result.errors = ErrorReport::merge(&reports);
    Ok(result)
}
