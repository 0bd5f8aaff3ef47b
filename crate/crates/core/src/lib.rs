//! Bit-accurate model of an FP16 analog compute-in-memory macro.
//!
//! Inputs are aligned either to a global maximum exponent (MEA) or to one of
//! three per-region shared exponents (SEA), driven bit-serially into a
//! crossbar of bit-sliced weights, either all at once or one exponent group
//! per phase (DWA), and the partial sums are normalized back to FP16.
//!
//! ```
//! use fpcim_core::{run_mac, CrossbarTile, Fp16Value, MacroConfig};
//!
//! let weights = vec![vec![Fp16Value::from_f64(2.0), Fp16Value::from_f64(-0.5)]];
//! let tile = CrossbarTile::new(&weights, 11).unwrap();
//! let inputs = [Fp16Value::ONE, Fp16Value::from_f64(4.0)];
//! let out = run_mac(&inputs, &tile, &MacroConfig::default()).unwrap();
//! assert_eq!(out.outputs[0].to_f64(), 0.0);
//! ```

pub mod alignment;
pub mod analysis;
pub mod crossbar;
pub mod error;
pub mod experiment;
pub mod fpcodec;
pub mod ingest;
pub mod pipeline;
pub mod schedule;
pub mod sea;

pub use alignment::{align, align_input, AlignedInput, DwiScope, WidthPolicy};
pub use analysis::{error_stats, histogram, sample_bimodal, BimodalSpec, ErrorReport, ExponentHistogram};
pub use crossbar::{adc_convert, AdcMode, AdcModel, CrossbarTile, RowMask};
pub use error::{Error, Result};
pub use experiment::{evaluate, Strategy, StrategyResult, Workload};
pub use fpcodec::{decode, encode, exact_dot, Dyadic, ExactAccumulator, Fp16Value};
pub use ingest::{load_tensor, load_tile, save_tensor, save_tile, Dtype, Tensor};
pub use pipeline::{preprocess, run_mac, MacOutcome, MacroConfig};
pub use schedule::{compare_latency, plan_schedule, Activation, AlignmentMode, CycleReport, Schedule};
pub use sea::{classify_exponent, mea_shift, sea_shift, ExponentGroup, SeaConfig, SharedExponentPolicy};
