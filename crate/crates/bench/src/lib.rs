//! Shared fixtures for the benchmarks.

use fpcim_core::experiment::Workload;
use fpcim_core::{BimodalSpec, MacroConfig};

/// One 128-row tile of 11 columns and `calls` bimodal input vectors.
pub fn bimodal_workload(calls: usize) -> Workload {
    let config = MacroConfig::default();
    Workload::synthetic(&BimodalSpec::default(), calls, config.rows, 11, config.w_s).expect("default spec is valid")
}
