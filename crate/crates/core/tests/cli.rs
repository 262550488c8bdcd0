use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tvspec(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tvspec"));
    cmd.args(args).env_remove("TVSPEC_OUT");
    if let Some(dir) = env_out {
        cmd.env("TVSPEC_OUT", dir);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RUN: &str = r#"{
    "input": {"generator": {"process": "piecewise_vma"}},
    "sampler": {"iterations": 40, "burn_in": 10, "seed": 5},
    "grid": {"times": 12, "freqs": 6},
    "dump_snapshots": true
}"#;

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_reproducible_and_ase_of_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir, "sim.json", r#"{"input": {"generator": {"process": "piecewise_vma"}}, "grid": {"times": 30}}"#);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(tvspec(&["simulate", "--config", s(&config), "--seed", "11", "--out", s(&a)], None));
    ok(tvspec(&["simulate", "--config", s(&config), "--seed", "11", "--out", s(&b)], None));
    let series = std::fs::read(a.join("series.csv")).unwrap();
    assert_eq!(series, std::fs::read(b.join("series.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&series).lines().count(), 601);

    let table = ok(tvspec(&["ase", s(&a.join("truth")), s(&a.join("truth"))], None));
    let lines: Vec<&str> = table.lines().collect();
    let labels: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(labels, ["f11", "f22", "f33", "rho21", "rho31", "rho32"]);
    let values: Vec<f64> = lines[1]
        .split_whitespace()
        .skip(3)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(values, vec![0.0; 6]);
}

#[test]
fn truth_grids_carry_axis_headers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir, "sim.json", r#"{"input": {"generator": {"process": "slow_varying_vma"}}, "grid": {"times": 4, "freqs": 3}}"#);
    ok(tvspec(&["simulate", "--config", s(&config), "--out", s(dir.path())], None));
    let text = std::fs::read_to_string(dir.path().join("truth/rho21.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,0,0.25,0.5");
    let times: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(times, ["256", "512", "768", "1024"]);
}

#[test]
fn analyze_writes_every_output_and_reruns_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir, "run.json", SMALL_RUN);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(tvspec(&["analyze", "--config", s(&config), "--out", s(&first)], None));
    for name in [
        "manifest.json", "pm.json", "ploc.json", "diagnostics.json", "timing.json", "snapshots.json", "series.csv",
        "f11.csv", "logf33.csv", "logf11_lower.csv", "rho32_upper.csv", "truth/f11.csv",
    ] {
        assert!(first.join(name).exists(), "{name} missing");
    }

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sampler"]["seed"], 5);
    assert_eq!(manifest["prior"]["n_min"], 60);
    assert!(manifest.get("output").is_none());

    let pm: Value = serde_json::from_str(&std::fs::read_to_string(first.join("pm.json")).unwrap()).unwrap();
    let pm: Vec<f64> = serde_json::from_value(pm["pm"].clone()).unwrap();
    assert_eq!(pm.len(), 10);
    assert!((pm.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let diagnostics: Value = serde_json::from_str(&std::fs::read_to_string(first.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diagnostics["snapshots"], 30);
    assert!(diagnostics["acceptance"]["hmc"].as_f64().unwrap() > 0.0);
    let timing: Value = serde_json::from_str(&std::fs::read_to_string(first.join("timing.json")).unwrap()).unwrap();
    assert!(timing["seconds_per_iteration"].as_f64().unwrap() > 0.0);

    ok(tvspec(&["analyze", "--config", s(&first.join("manifest.json")), "--out", s(&second)], None));
    let a = files(&first);
    let b = files(&second);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(&first).unwrap(), y.strip_prefix(&second).unwrap());
        if x.ends_with("timing.json") {
            continue;
        }
        assert!(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn summarize_reproduces_analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir, "run.json", SMALL_RUN);
    let run = dir.path().join("run");
    let again = dir.path().join("again");
    ok(tvspec(&["analyze", "--config", s(&config), "--out", s(&run)], None));
    ok(tvspec(&["summarize", s(&run.join("snapshots.json")), "--out", s(&again)], None));
    for p in files(&again) {
        let name = p.strip_prefix(&again).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(run.join(name)).unwrap(), "{}", name.display());
    }
    assert!(again.join("pm.json").exists() && again.join("rho21.csv").exists());
}

#[test]
fn output_root_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir, "sim.json", r#"{"input": {"generator": {"process": "piecewise_vma"}}, "replicates": 2}"#);
    let root = dir.path().join("from-env");
    ok(tvspec(&["simulate", "--config", s(&config), "--jobs", "1"], Some(&root)));
    assert!(root.join("manifest.json").exists());
    let a = std::fs::read(root.join("replicate_000/series.csv")).unwrap();
    let b = std::fs::read(root.join("replicate_001/series.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn csv_input_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("a,b,c\n");
    for t in 0..200 {
        let t = t as f64;
        body.push_str(&format!("{},{},{}\n", (t * 0.7).sin(), (t * 1.3).cos(), (t * 0.11).sin() * 2.0));
    }
    let csv = write(&dir, "x.csv", &body);
    let config = write(
        &dir,
        "run.json",
        &format!(
            r#"{{"input": {{"csv": {{"path": {:?}}}}}, "prior": {{"max_segments": 3, "n_min": 60, "kappa": 1e5, "intercept_var": 1e4, "truncation": 10}},
                "sampler": {{"iterations": 20, "burn_in": 5}}, "grid": {{"times": 5, "freqs": 4}}}}"#,
            s(&csv)
        ),
    );
    let out = dir.path().join("out");
    ok(tvspec(&["analyze", "--config", s(&config), "--out", s(&out)], None));
    let pm: Value = serde_json::from_str(&std::fs::read_to_string(out.join("pm.json")).unwrap()).unwrap();
    assert_eq!(pm["m"], serde_json::json!([1, 2, 3]));
    assert!(!out.join("truth").exists());
}

fn exit_code(args: &[&str]) -> i32 {
    tvspec(args, None).status.code().unwrap()
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = |config: &Path| exit_code(&["analyze", "--config", s(config), "--out", s(&out)]);

    assert_eq!(run(&dir.path().join("missing.json")), 2);
    assert_eq!(run(&write(&dir, "bad.json", "{ not json")), 2);
    assert_eq!(run(&write(&dir, "unknown.json", r#"{"input": {"generator": {"process": "ar1"}}}"#)), 2);
    let burn = r#"{"input": {"generator": {"process": "piecewise_vma"}}, "sampler": {"iterations": 10, "burn_in": 10}}"#;
    assert_eq!(run(&write(&dir, "burn.json", burn)), 2);

    let csv_config = |name: &str, body: &str| {
        let csv = write(&dir, name, body);
        write(&dir, &format!("{name}.json"), &format!(r#"{{"input": {{"csv": {{"path": {:?}}}}}}}"#, s(&csv)))
    };
    let nan = format!("x,y\n{}1,NaN\n", "1,2\n".repeat(200));
    assert_eq!(run(&csv_config("nan.csv", &nan)), 3);
    assert_eq!(run(&csv_config("header.csv", "x,y\n")), 3);
    assert_eq!(run(&csv_config("short.csv", &"1,2\n".repeat(100))), 3);
    assert_eq!(run(&csv_config("absent.csv", "")), 3);

    let stderr = String::from_utf8(tvspec(&["analyze", "--config", s(&dir.path().join("nan.csv.json")), "--out", s(&out)], None).stderr).unwrap();
    assert!(stderr.contains("line 202, column 2"), "{stderr}");

    let truth = dir.path().join("no-truth");
    std::fs::create_dir_all(&truth).unwrap();
    assert_eq!(exit_code(&["ase", s(dir.path()), s(&truth)]), 3);
}

#[test]
fn eeg_shaped_csv_loads() {
    let dir = tempfile::tempdir().unwrap();
    let body: String = (0..2560).map(|t| format!("{},{}\n", t % 7, (t * 3) % 11)).collect();
    let x = tvspec::io::load_csv(write(&dir, "eeg.csv", &body)).unwrap();
    assert_eq!((x.len(), x.dim()), (2560, 2));
}
