use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fpcim_core::{sample_bimodal, save_tensor, BimodalSpec, Dtype, Fp16Value, Tensor};

fn fpcim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpcim")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Column `name` of every data row.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header
        .iter()
        .position(|h| *h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn synthetic_reduction_is_a_fraction() {
    let csv = stdout(&fpcim(&[
        "simulate",
        "--synthetic",
        "default",
        "--strategy",
        "sea-dwa-fwi",
        "--calls",
        "30",
    ]));
    let r: f64 = column(&csv, "mean_reduction")[0].parse().unwrap();
    assert!(r > 0.0 && r < 1.0, "{r}");
    assert_eq!(column(&csv, "baseline"), vec!["mea-dwi"]);
}

#[test]
fn all_zero_tensor_costs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("zeros.bin");
    save_tensor(
        &Tensor::new(vec![Fp16Value::ZERO; 300]).with_layer("zeros"),
        &t,
        Dtype::F16,
    )
    .unwrap();
    let csv = stdout(&fpcim(&["simulate", "--tensor", p(&t)]));
    assert_eq!(column(&csv, "workload"), vec!["zeros"; 4]);
    assert!(column(&csv, "input_cycles").iter().all(|c| c == "0"));
    assert!(column(&csv, "abs_err_max").iter().all(|c| c == "0"));
    assert!(column(&csv, "mean_reduction").iter().all(String::is_empty));
}

#[test]
fn weights_and_activations_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.bin");
    let w = dir.path().join("w.bin");
    let acts = sample_bimodal(&BimodalSpec::default(), 256).unwrap();
    save_tensor(&Tensor::new(acts), &x, Dtype::F16).unwrap();
    let weights = Tensor {
        values: (0..128 * 3)
            .map(|i| Fp16Value::from_f64(f64::from(i % 7) / 8.0 - 0.4))
            .collect(),
        shape: vec![128, 3],
        layer: None,
        dtype: Dtype::F32,
    };
    save_tensor(&weights, &w, Dtype::F32).unwrap();
    let csv = stdout(&fpcim(&[
        "simulate",
        "--tensor",
        p(&x),
        "--weights",
        p(&w),
        "--strategy",
        "mea-dwi",
    ]));
    assert_eq!(column(&csv, "calls"), vec!["2"]);
    assert_eq!(column(&csv, "columns"), vec!["3"]);
    assert_eq!(column(&csv, "mean_reduction"), vec!["0"]);

    let flat = Tensor::new(vec![Fp16Value::ONE; 4]);
    save_tensor(&flat, &w, Dtype::F16).unwrap();
    assert_eq!(
        fpcim(&["simulate", "--tensor", p(&x), "--weights", p(&w)])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn exit_codes() {
    assert_eq!(fpcim(&["simulate", "--strategy", "fastest"]).status.code(), Some(2));
    assert_eq!(fpcim(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(fpcim(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));

    let t = dir.path().join("short.bin");
    fs::write(&t, b"{\"dtype\":\"f16\",\"shape\":[4]}\n\x00\x3c").unwrap();
    let o = fpcim(&["profile", p(&t)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("payload"));

    let g = dir.path().join("g.json");
    fs::write(&g, r#"{"e_c":[]}"#).unwrap();
    assert_eq!(fpcim(&["sweep", "--grid", p(&g)]).status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    fs::write(
        &g,
        r#"{"policy":["static","dynamic_group_max"],"adc":["ideal","quantized"]}"#,
    )
    .unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        stdout(&fpcim(&["sweep", "--grid", p(&g), "--calls", "10", "--out", p(out)]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        column(&fs::read_to_string(&a).unwrap(), "cell"),
        vec!["0", "1", "2", "3"]
    );
}

#[test]
fn single_cell_sweep_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    fs::write(&g, r#"{"strategy":["sea-dwa-fwi"]}"#).unwrap();
    let sweep = stdout(&fpcim(&["sweep", "--grid", p(&g), "--calls", "25", "--seed", "7"]));
    let sim = stdout(&fpcim(&[
        "simulate",
        "--strategy",
        "sea-dwa-fwi",
        "--calls",
        "25",
        "--seed",
        "7",
    ]));
    let metrics = |csv: &str, skip: usize| -> String {
        csv.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .skip(skip)
            .collect::<Vec<_>>()
            .join(",")
    };
    assert_eq!(metrics(&sweep, 9), metrics(&sim, 2));
}

#[test]
fn static_center_exponent_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    fs::write(&g, r#"{"policy":["static"],"e_c":[15,16,17,18,19,20,21,22,23]}"#).unwrap();
    let csv = stdout(&fpcim(&["sweep", "--grid", p(&g), "--calls", "50", "--seed", "42"]));
    let num = |name: &str| -> Vec<f64> { column(&csv, name).iter().map(|v| v.parse().unwrap()).collect() };
    let dropped = num("dropped_bits");
    let clamps = num("clamp_events");
    let err = num("rel_err_median");
    // Below the group maximum, inputs above e_c are clamped instead of
    // shifted, so fewer bits are dropped but the error grows.
    assert!(dropped.windows(2).all(|w| w[0] <= w[1]), "{dropped:?}");
    assert!(clamps.windows(2).all(|w| w[0] >= w[1]), "{clamps:?}");
    assert!(err.windows(2).all(|w| w[0] >= w[1]), "{err:?}");
    assert_eq!(clamps[8], 0.0);
    assert!(clamps[0] > 0.0);
}

#[test]
fn profile_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.bin");
    let empty = dir.path().join("empty.bin");
    let big = dir.path().join("big.bin");
    save_tensor(
        &Tensor::new(vec![Fp16Value::ZERO, Fp16Value::ZERO, Fp16Value::ONE]),
        &small,
        Dtype::F16,
    )
    .unwrap();
    save_tensor(&Tensor::new(Vec::new()), &empty, Dtype::F16).unwrap();
    let values = sample_bimodal(&BimodalSpec::default(), 100_000).unwrap();
    save_tensor(&Tensor::new(values.clone()), &big, Dtype::F16).unwrap();

    let out = dir.path().join("prof");
    stdout(&fpcim(&["profile", p(&small), p(&empty), p(&big), "--out", p(&out)]));

    let small_csv = fs::read_to_string(out.join("small.hist.csv")).unwrap();
    assert!(small_csv.contains("\n15,1,center\n"));
    assert!(small_csv.contains("\nzero,2,\n"));
    let empty_csv = fs::read_to_string(out.join("empty.hist.csv")).unwrap();
    assert!(column(&empty_csv, "count").iter().all(|c| c == "0"));

    let mut want = [0u64; 32];
    let mut zeros = 0u64;
    for v in &values {
        match v.to_bits() & 0x7FFF {
            0 => zeros += 1,
            r => want[usize::from(r >> 10)] += 1,
        }
    }
    let counts: Vec<u64> = column(&fs::read_to_string(out.join("big.hist.csv")).unwrap(), "count")
        .iter()
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(&counts[..32], &want[..]);
    assert_eq!(counts[32], zeros);

    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("profile.json")).unwrap()).unwrap();
    assert_eq!(json[0]["zeros"], 2);
    assert_eq!(json[1]["elements"], 0);

    let combined = stdout(&fpcim(&["profile", p(&small)]));
    assert!(combined.starts_with("tensor,exponent,count,group\n"));
    assert_eq!(combined.lines().count(), 1 + 34);
}

#[test]
fn layer_scoped_dwi_never_beats_per_call() {
    let run = |scope: &str| -> u64 {
        let csv = stdout(&fpcim(&[
            "simulate",
            "--strategy",
            "mea-dwi",
            "--calls",
            "20",
            "--dwi-scope",
            scope,
        ]));
        column(&csv, "input_cycles")[0].parse().unwrap()
    };
    let (call, layer) = (run("call"), run("layer"));
    assert!(layer >= call, "{layer} < {call}");
    assert_eq!(fpcim(&["simulate", "--dwi-scope", "model"]).status.code(), Some(2));
}
