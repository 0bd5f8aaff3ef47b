//! Command implementations behind the `fpcim` binary.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fpcim_core::experiment::{evaluate, mean_reduction, schedule_cycles, synthetic_weights, Strategy, Workload};
use fpcim_core::{
    histogram, load_tensor, AdcMode, AdcModel, BimodalSpec, DwiScope, ErrorReport, ExactAccumulator, MacroConfig,
    SharedExponentPolicy,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "fpcim", version, about = "FP16 compute-in-memory macro simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare alignment and activation strategies on a workload.
    Simulate(SimulateArgs),
    /// Exponent histograms of tensor files.
    Profile(ProfileArgs),
    /// Evaluate a grid of configurations.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct WorkloadArgs {
    /// Macro configuration as JSON; flags override its fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Activation tensor; split into calls of one input per row.
    #[arg(long = "tensor", value_name = "PATH")]
    pub tensors: Vec<PathBuf>,
    /// Weight matrix of shape [rows, cols]. Synthetic when absent.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// `default` or a bimodal spec JSON file. Used when no tensor is given.
    #[arg(long, value_name = "SPEC")]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Macro calls drawn from a synthetic spec.
    #[arg(long, default_value_t = 100)]
    pub calls: usize,
    /// Synthetic weight columns; defaults to as many as fit the macro.
    #[arg(long)]
    pub cols: Option<usize>,
    /// Shared-exponent policy: `static` or `dynamic`.
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<SharedExponentPolicy>,
    /// Switch to a quantized ADC of this resolution.
    #[arg(long)]
    pub adc_bits: Option<u32>,
    #[arg(long)]
    pub skip_nearzero: bool,
    /// Size automatic DWI registers per macro call or per layer.
    #[arg(long, value_name = "call|layer")]
    pub dwi_scope: Option<DwiScope>,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Strategies to run; all four when absent.
    #[arg(long = "strategy", value_parser = parse_strategy)]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_parser = parse_strategy, default_value = "mea-dwi")]
    pub baseline: Strategy,
    /// Directory for report.json and report.csv; CSV goes to stdout otherwise.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    #[arg(required = true, value_name = "TENSOR")]
    pub tensors: Vec<PathBuf>,
    /// Directory for one histogram CSV per tensor plus profile.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Grid JSON: optional axes `strategy`, `policy`, `e_z`, `e_c`, `e_m`,
    /// `adc`, `skip_nearzero`.
    #[arg(long, value_name = "PATH")]
    pub grid: PathBuf,
    #[arg(long, value_parser = parse_strategy, default_value = "mea-dwi")]
    pub baseline: Strategy,
    /// CSV output file; stdout otherwise.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: fpcim_core::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<SharedExponentPolicy, String> {
    s.parse().map_err(|e: fpcim_core::Error| e.to_string())
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

impl From<fpcim_core::Error> for Failure {
    fn from(e: fpcim_core::Error) -> Self {
        use fpcim_core::Error as E;
        match e {
            E::Config(_) | E::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Data(format!("stdout: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{what} {}: {e}", path.display())))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => simulate(args, out),
        Command::Profile(args) => profile(args, out),
        Command::Sweep(args) => sweep(args, out),
    }
}

/// File configuration with command-line overrides applied.
pub fn resolve_config(args: &WorkloadArgs) -> Result<MacroConfig> {
    let mut config = match &args.config {
        Some(path) => read_json(path, "config")?,
        None => MacroConfig::default(),
    };
    if let Some(policy) = args.policy {
        config.sea.policy = policy;
    }
    if let Some(bits) = args.adc_bits {
        config.adc = AdcModel::quantized(bits, config.adc.full_scale);
    }
    config.skip_nearzero |= args.skip_nearzero;
    if let Some(scope) = args.dwi_scope {
        config.dwi_scope = scope;
    }
    config.validate()?;
    Ok(config)
}

fn synthetic_spec(args: &WorkloadArgs) -> Result<BimodalSpec> {
    let mut spec = match args.synthetic.as_deref() {
        None | Some("default") => BimodalSpec::default(),
        Some(path) => read_json(Path::new(path), "synthetic spec")?,
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn default_cols(config: &MacroConfig) -> usize {
    config.rows / config.w_s as usize
}

/// Builds the workloads named by the arguments.
pub fn load_workloads(args: &WorkloadArgs, config: &MacroConfig) -> Result<Vec<Workload>> {
    let cols = args.cols.unwrap_or_else(|| default_cols(config));
    if args.tensors.is_empty() {
        let spec = synthetic_spec(args)?;
        let mut w = Workload::synthetic(&spec, args.calls, config.rows, cols, config.w_s)?;
        if let Some(path) = &args.weights {
            w = Workload::from_activations("synthetic", &w.calls.concat(), load_weights(path)?, config.w_s)?;
        }
        return Ok(vec![w]);
    }
    let columns = match &args.weights {
        Some(path) => load_weights(path)?,
        None => synthetic_weights(args.seed.unwrap_or(BimodalSpec::default().seed), config.rows, cols),
    };
    args.tensors
        .iter()
        .map(|path| {
            let t = load_tensor(path)?;
            let name = t.layer.clone().unwrap_or_else(|| path.display().to_string());
            Ok(Workload::from_activations(
                name,
                &t.values,
                columns.clone(),
                config.w_s,
            )?)
        })
        .collect()
}

fn load_weights(path: &Path) -> Result<Vec<Vec<fpcim_core::Fp16Value>>> {
    let t = load_tensor(path)?;
    let [rows, cols] = t.shape[..] else {
        return Err(Failure::Data(format!(
            "{}: weights need shape [rows, cols], got {:?}",
            path.display(),
            t.shape
        )));
    };
    Ok((0..cols)
        .map(|c| (0..rows).map(|r| t.values[r * cols + c]).collect())
        .collect())
}

/// One (workload, strategy) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub workload: String,
    pub strategy: Strategy,
    pub baseline: Strategy,
    pub calls: usize,
    pub columns: usize,
    pub input_cycles: u64,
    pub mean_reduction: Option<f64>,
    pub clip_events: u64,
    pub clamp_events: u64,
    pub overflow_calls: usize,
    pub errors: ErrorReport,
}

pub const METRIC_COLUMNS: &str = "calls,columns,input_cycles,baseline,mean_reduction,rel_err_median,rel_err_mean,\
rel_err_p99,abs_err_median,abs_err_mean,abs_err_max,oracle_zero,nonfinite_outputs,dropped_bits,clamp_events,\
clip_events,overflow_calls";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl ResultRow {
    pub fn metrics_csv(&self) -> String {
        let e = &self.errors;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.calls,
            self.columns,
            self.input_cycles,
            self.baseline,
            opt(self.mean_reduction),
            e.relative.median,
            e.relative.mean,
            e.relative.p99,
            e.absolute.median,
            e.absolute.mean,
            e.absolute.max,
            e.oracle_zero,
            e.nonfinite_outputs,
            e.dropped_bits,
            self.clamp_events,
            self.clip_events,
            self.overflow_calls,
        )
    }
}

pub fn evaluate_row(
    workload: &Workload,
    oracle: &[Vec<ExactAccumulator>],
    strategy: Strategy,
    baseline: Strategy,
    config: &MacroConfig,
) -> Result<ResultRow> {
    let r = evaluate(strategy, workload, oracle, config)?;
    let base_cycles = schedule_cycles(&workload.calls, &baseline.apply(config))?;
    Ok(ResultRow {
        workload: workload.name.clone(),
        strategy,
        baseline,
        calls: r.calls,
        columns: workload.columns.len(),
        input_cycles: r.total_cycles,
        mean_reduction: mean_reduction(&r.cycles_per_call, &base_cycles)?,
        clip_events: r.clip_events,
        clamp_events: r.clamp_events,
        overflow_calls: r.overflow_calls,
        errors: r.errors,
    })
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    config: &'a MacroConfig,
    baseline: Strategy,
    results: &'a [ResultRow],
}

pub fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(&args.workload)?;
    let strategies = if args.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        args.strategies.clone()
    };
    let workloads = load_workloads(&args.workload, &config)?;
    let mut rows = Vec::new();
    for w in &workloads {
        let oracle = w.oracle()?;
        let batch: Vec<ResultRow> = strategies
            .par_iter()
            .map(|&s| evaluate_row(w, &oracle, s, args.baseline, &config))
            .collect::<Result<_>>()?;
        rows.extend(batch);
    }

    let mut csv = format!("workload,strategy,{METRIC_COLUMNS}\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            csv_field(&r.workload),
            r.strategy,
            r.metrics_csv()
        ));
    }
    match &args.out {
        None => emit(out, &csv),
        Some(dir) => {
            create_dir(dir)?;
            let report = SimulateReport {
                config: &config,
                baseline: args.baseline,
                results: &rows,
            };
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            write_file(&dir.join("report.json"), json.as_bytes())?;
            write_file(&dir.join("report.csv"), csv.as_bytes())
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct ProfileEntry {
    tensor: String,
    layer: Option<String>,
    elements: u64,
    zeros: u64,
    nonfinite: u64,
    zero_fraction: f64,
    group_fractions: [f64; 3],
}

pub fn profile(args: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let mut entries = Vec::new();
    let mut combined = String::from("tensor,exponent,count,group\n");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    for path in &args.tensors {
        let t = load_tensor(path)?;
        let h = histogram(&t.values);
        let name = path.display().to_string();
        if let Some(dir) = &args.out {
            let stem = path
                .file_stem()
                .map_or_else(|| "tensor".into(), |s| s.to_string_lossy().into_owned());
            write_file(&dir.join(format!("{stem}.hist.csv")), h.to_csv().as_bytes())?;
        } else {
            for line in h.to_csv().lines().skip(1) {
                combined.push_str(&format!("{},{line}\n", csv_field(&name)));
            }
        }
        entries.push(ProfileEntry {
            tensor: name,
            layer: t.layer,
            elements: h.total(),
            zeros: h.zeros,
            nonfinite: h.nonfinite,
            zero_fraction: h.zero_fraction(),
            group_fractions: h.group_fractions(),
        });
    }
    match &args.out {
        None => emit(out, &combined),
        Some(dir) => {
            let mut json = serde_json::to_string_pretty(&entries).expect("profile serializes");
            json.push('\n');
            write_file(&dir.join("profile.json"), json.as_bytes())
        }
    }
}

/// Sweep axes. Absent axes keep the base configuration's value.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub strategy: Option<Vec<Strategy>>,
    pub policy: Option<Vec<SharedExponentPolicy>>,
    pub e_z: Option<Vec<u8>>,
    pub e_c: Option<Vec<u8>>,
    pub e_m: Option<Vec<u8>>,
    pub adc: Option<Vec<AdcMode>>,
    pub skip_nearzero: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub config: MacroConfig,
}

impl Grid {
    /// Cells in row-major order, the last axis varying fastest.
    pub fn cells(&self, base: &MacroConfig) -> Result<Vec<Cell>> {
        let axes = [
            self.strategy.as_ref().map(Vec::len),
            self.policy.as_ref().map(Vec::len),
            self.e_z.as_ref().map(Vec::len),
            self.e_c.as_ref().map(Vec::len),
            self.e_m.as_ref().map(Vec::len),
            self.adc.as_ref().map(Vec::len),
            self.skip_nearzero.as_ref().map(Vec::len),
        ];
        if axes.iter().all(Option::is_none) || axes.contains(&Some(0)) {
            return Err(Failure::Usage("sweep grid is empty".into()));
        }
        fn axis<T: Copy>(v: &Option<Vec<T>>, default: T) -> Vec<T> {
            v.clone().unwrap_or_else(|| vec![default])
        }
        let mut cells = Vec::new();
        for &strategy in &axis(&self.strategy, Strategy::SeaDwaFwi) {
            for &policy in &axis(&self.policy, base.sea.policy) {
                for &e_z in &axis(&self.e_z, base.sea.e_z) {
                    for &e_c in &axis(&self.e_c, base.sea.e_c) {
                        for &e_m in &axis(&self.e_m, base.sea.e_m) {
                            for &adc in &axis(&self.adc, base.adc.mode) {
                                for &skip in &axis(&self.skip_nearzero, base.skip_nearzero) {
                                    let mut config = *base;
                                    config.sea.policy = policy;
                                    config.sea.e_z = e_z;
                                    config.sea.e_c = e_c;
                                    config.sea.e_m = e_m;
                                    config.adc.mode = adc;
                                    config.skip_nearzero = skip;
                                    config.validate()?;
                                    cells.push(Cell { strategy, config });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn policy_name(p: SharedExponentPolicy) -> &'static str {
    match p {
        SharedExponentPolicy::Static => "static",
        SharedExponentPolicy::DynamicGroupMax => "dynamic_group_max",
    }
}

fn adc_name(m: AdcMode) -> &'static str {
    match m {
        AdcMode::Ideal => "ideal",
        AdcMode::Quantized => "quantized",
    }
}

pub fn sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let base = resolve_config(&args.workload)?;
    let grid: Grid = read_json(&args.grid, "grid")?;
    let cells = grid.cells(&base)?;
    let workloads = load_workloads(&args.workload, &base)?;
    let oracles = workloads.iter().map(Workload::oracle).collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..workloads.len()).map(move |w| (c, w)))
        .collect();
    let rows: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(c, w)| {
            let cell = &cells[c];
            evaluate_row(&workloads[w], &oracles[w], cell.strategy, args.baseline, &cell.config)
        })
        .collect::<Result<_>>()?;

    let mut csv = format!("cell,workload,strategy,policy,e_z,e_c,e_m,adc,skip_nearzero,{METRIC_COLUMNS}\n");
    for (&(c, _), row) in jobs.iter().zip(&rows) {
        let cfg = &cells[c].config;
        csv.push_str(&format!(
            "{c},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&row.workload),
            row.strategy,
            policy_name(cfg.sea.policy),
            cfg.sea.e_z,
            cfg.sea.e_c,
            cfg.sea.e_m,
            adc_name(cfg.adc.mode),
            cfg.skip_nearzero,
            row.metrics_csv(),
        ));
    }
    match &args.out {
        None => emit(out, &csv),
        Some(path) => write_file(path, csv.as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fpcim").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn unknown_strategy_is_a_usage_error() {
        let err = Cli::try_parse_from(["fpcim", "simulate", "--strategy", "sea-fwi"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sea":{"policy":"static","e_c":20},"skip_nearzero":false}"#).unwrap();
        let p = path.to_str().unwrap();
        let Command::Simulate(a) =
            parse(&["simulate", "--config", p, "--policy", "dynamic", "--adc-bits", "5"]).command
        else {
            unreachable!()
        };
        let c = resolve_config(&a.workload).unwrap();
        assert_eq!(c.sea.policy, SharedExponentPolicy::DynamicGroupMax);
        assert_eq!(c.sea.e_c, 20);
        assert_eq!((c.adc.mode, c.adc.bits), (AdcMode::Quantized, 5));
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"rows":"many"}"#).unwrap();
        let cli = parse(&["simulate", "--config", path.to_str().unwrap()]);
        let err = run(&cli, &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        fs::write(&path, r#"{"rows":500}"#).unwrap();
        let err = run(&cli, &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_tensor_is_a_data_error() {
        let cli = parse(&["profile", "/nonexistent/x.bin"]);
        assert_eq!(run(&cli, &mut Vec::new()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn grid_cardinality_is_product_of_axes() {
        let grid: Grid = serde_json::from_str(
            r#"{"strategy":["sea-dwa-fwi","mea-fwi"],"e_c":[20,21,22],"adc":["ideal","quantized"]}"#,
        )
        .unwrap();
        let cells = grid.cells(&MacroConfig::default()).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[1].config.adc.mode, AdcMode::Quantized);
        assert_eq!(cells[2].config.sea.e_c, 21);
        assert_eq!(cells[6].strategy, Strategy::MeaFwi);
    }

    #[test]
    fn empty_grids_rejected() {
        for g in ["{}", r#"{"e_c":[]}"#, r#"{"e_c":[20],"policy":[]}"#] {
            let grid: Grid = serde_json::from_str(g).unwrap();
            assert!(
                matches!(grid.cells(&MacroConfig::default()), Err(Failure::Usage(_))),
                "{g}"
            );
        }
        assert!(serde_json::from_str::<Grid>(r#"{"bogus":[1]}"#).is_err());
    }

    #[test]
    fn csv_fields_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
