//! Exponent statistics, a synthetic bimodal activation generator and
//! numerical error metrics.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcodec::{ExactAccumulator, Fp16Value, ORACLE_SCALE_EXPONENT};
use crate::sea::{classify_exponent, ExponentGroup};

/// Counts of non-zero finite values per biased exponent, plus zeros and
/// non-finite values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentHistogram {
    pub bins: [u64; 32],
    pub zeros: u64,
    pub nonfinite: u64,
}

impl ExponentHistogram {
    pub fn add(&mut self, v: Fp16Value) {
        if !v.is_finite() {
            self.nonfinite += 1;
        } else if v.is_zero() {
            self.zeros += 1;
        } else {
            self.bins[usize::from(v.exponent())] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.finite() + self.nonfinite
    }

    /// Zeros plus binned values.
    pub fn finite(&self) -> u64 {
        self.bins.iter().sum::<u64>() + self.zeros
    }

    /// Non-zero finite values per group, indexed by [`ExponentGroup::index`].
    pub fn group_counts(&self) -> [u64; 3] {
        let mut counts = [0; 3];
        for (e, &n) in self.bins.iter().enumerate() {
            counts[classify_exponent(e as u8).index()] += n;
        }
        counts
    }

    /// Group mass as a fraction of all finite values. Zeros form the
    /// remaining mass; non-finite values are excluded.
    pub fn group_fractions(&self) -> [f64; 3] {
        let finite = self.finite();
        if finite == 0 {
            return [0.0; 3];
        }
        self.group_counts().map(|n| n as f64 / finite as f64)
    }

    pub fn zero_fraction(&self) -> f64 {
        match self.finite() {
            0 => 0.0,
            n => self.zeros as f64 / n as f64,
        }
    }

    /// `exponent,count,group` rows followed by `zero` and `nonfinite` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("exponent,count,group\n");
        for (e, n) in self.bins.iter().enumerate() {
            let g = classify_exponent(e as u8);
            out.push_str(&format!("{e},{n},{}\n", g.name()));
        }
        out.push_str(&format!("zero,{},\n", self.zeros));
        out.push_str(&format!("nonfinite,{},\n", self.nonfinite));
        out
    }
}

pub fn histogram(values: &[Fp16Value]) -> ExponentHistogram {
    let mut h = ExponentHistogram::default();
    for &v in values {
        h.add(v);
    }
    h
}

/// Mixture of exact zeros, near-zero values, a discretized normal over the
/// center exponents and a near-maximum tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalSpec {
    pub p_zero: f64,
    pub p_nearzero: f64,
    pub center_mean: f64,
    pub center_spread: f64,
    pub p_nearmax: f64,
    /// Largest near-maximum exponent drawn; 30 keeps every sample finite.
    pub nearmax_top: u8,
    pub seed: u64,
}

impl Default for BimodalSpec {
    fn default() -> Self {
        Self {
            p_zero: 0.35,
            p_nearzero: 0.10,
            center_mean: 15.0,
            center_spread: 3.0,
            p_nearmax: 0.02,
            nearmax_top: 30,
            seed: 42,
        }
    }
}

impl BimodalSpec {
    pub fn p_center(&self) -> f64 {
        1.0 - self.p_zero - self.p_nearzero - self.p_nearmax
    }

    pub fn validate(&self) -> Result<()> {
        let masses = [self.p_zero, self.p_nearzero, self.p_nearmax];
        if masses.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("probabilities must lie in [0, 1]".into()));
        }
        if self.p_center() < -1e-12 {
            return Err(Error::InvalidSpec(format!(
                "masses sum to {} > 1",
                masses.iter().sum::<f64>()
            )));
        }
        if !self.center_mean.is_finite() || !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
            return Err(Error::InvalidSpec(
                "center_mean and center_spread must be finite, spread > 0".into(),
            ));
        }
        if !(24..=31).contains(&self.nearmax_top) {
            return Err(Error::InvalidSpec("nearmax_top outside [24, 31]".into()));
        }
        Ok(())
    }

    /// Probability of each center exponent 4..=23.
    pub fn center_weights(&self) -> Vec<f64> {
        ExponentGroup::Center
            .range()
            .map(|e| {
                let z = (f64::from(e) - self.center_mean) / self.center_spread;
                (-0.5 * z * z).exp()
            })
            .collect()
    }
}

/// Stateful sampler; successive calls continue one random stream.
pub struct BimodalSampler {
    spec: BimodalSpec,
    rng: ChaCha8Rng,
    center: WeightedIndex<f64>,
}

impl BimodalSampler {
    pub fn new(spec: &BimodalSpec) -> Result<Self> {
        spec.validate()?;
        // Every weight underflows when the mean is far outside [4, 23].
        let weights = spec.center_weights();
        let center = WeightedIndex::new(&weights)
            .or_else(|_| WeightedIndex::new(vec![1.0; weights.len()]))
            .expect("uniform weights are valid");
        Ok(Self {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            center,
        })
    }

    pub fn next_value(&mut self) -> Fp16Value {
        let s = &self.spec;
        let u: f64 = self.rng.random();
        if u < s.p_zero {
            return Fp16Value::ZERO;
        }
        let (exponent, fraction) = if u < s.p_zero + s.p_nearzero {
            let e = self.rng.random_range(0u16..=3);
            // Subnormals need a non-zero fraction to stay non-zero.
            let lo = u16::from(e == 0);
            (e, self.rng.random_range(lo..1024))
        } else if u < s.p_zero + s.p_nearzero + s.p_nearmax {
            let e = self.rng.random_range(24..=u16::from(s.nearmax_top));
            let f = if e == 31 { 0 } else { self.rng.random_range(0..1024) };
            (e, f)
        } else {
            let e = 4 + self.center.sample(&mut self.rng) as u16;
            (e, self.rng.random_range(0..1024))
        };
        let sign = u16::from(self.rng.random::<bool>()) << 15;
        Fp16Value::from_bits(sign | exponent << 10 | fraction)
    }

    pub fn sample(&mut self, n: usize) -> Vec<Fp16Value> {
        (0..n).map(|_| self.next_value()).collect()
    }
}

pub fn sample_bimodal(spec: &BimodalSpec, n: usize) -> Result<Vec<Fp16Value>> {
    Ok(BimodalSampler::new(spec)?.sample(n))
}

/// Median, mean, 99th percentile and maximum of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub p99: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        // nearest rank
        let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            count: n,
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            p99: v[rank - 1],
            max: v[n - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub trials: usize,
    pub absolute: Summary,
    /// Over trials with a non-zero oracle only.
    pub relative: Summary,
    pub oracle_zero: usize,
    pub nonfinite_outputs: usize,
    pub dropped_bits: u64,
    #[serde(skip)]
    pub abs_errors: Vec<f64>,
    #[serde(skip)]
    pub rel_errors: Vec<f64>,
}

impl ErrorReport {
    pub fn with_dropped_bits(mut self, dropped_bits: u64) -> Self {
        self.dropped_bits = dropped_bits;
        self
    }

    /// Pools the trials of several reports.
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a ErrorReport>) -> Self {
        let mut abs = Vec::new();
        let mut rel = Vec::new();
        let mut out = ErrorReport::default();
        for r in reports {
            abs.extend_from_slice(&r.abs_errors);
            rel.extend_from_slice(&r.rel_errors);
            out.trials += r.trials;
            out.oracle_zero += r.oracle_zero;
            out.nonfinite_outputs += r.nonfinite_outputs;
            out.dropped_bits += r.dropped_bits;
        }
        out.absolute = Summary::of(&abs);
        out.relative = Summary::of(&rel);
        out.abs_errors = abs;
        out.rel_errors = rel;
        out
    }
}

fn scaled(v: Fp16Value) -> i128 {
    let mut acc = ExactAccumulator::new();
    acc.add_product(v, Fp16Value::ONE);
    acc.scaled_sum()
}

/// Error of each output against its exact value. The difference is formed
/// exactly before conversion to `f64`.
pub fn error_stats(outputs: &[Fp16Value], oracle: &[ExactAccumulator]) -> Result<ErrorReport> {
    if outputs.len() != oracle.len() {
        return Err(Error::LengthMismatch {
            left: outputs.len(),
            right: oracle.len(),
        });
    }
    let unit = 2f64.powi(ORACLE_SCALE_EXPONENT);
    let mut report = ErrorReport {
        trials: outputs.len(),
        ..ErrorReport::default()
    };
    for (&out, want) in outputs.iter().zip(oracle) {
        if !out.is_finite() {
            report.nonfinite_outputs += 1;
            continue;
        }
        let exact = want.scaled_sum();
        let abs = (scaled(out) - exact).unsigned_abs() as f64 * unit;
        report.abs_errors.push(abs);
        if exact == 0 {
            report.oracle_zero += 1;
        } else {
            report.rel_errors.push(abs / (exact.unsigned_abs() as f64 * unit));
        }
    }
    report.absolute = Summary::of(&report.abs_errors);
    report.relative = Summary::of(&report.rel_errors);
    Ok(report)
}
