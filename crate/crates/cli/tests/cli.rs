use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "seed": 11,
  "threshold": 2.0,
  "inputs": {
    "marginals": [{"kind": "gaussian", "mu": 0.0, "sigma": 1.0}, {"kind": "gaussian", "mu": 0.0, "sigma": 1.0}],
    "a_bounds": [-4.0, 8.0]
  },
  "analytic": {"b0": 0.0, "b1": 1.0, "c": [1.0, 0.5]},
  "design": {"n": 40},
  "gp": {"multistarts": 4},
  "curve": {"a_grid": {"from": -2.0, "to": 6.0, "points": 9}, "n": 1000, "m": 60, "n_clt": 500},
  "sobol": {"n_pf": 500, "bootstrap": 100},
  "pli": {"a": 2.0, "n": 4000, "delta_grid": [-0.5, 0.0, 0.5]}
}"#;

fn frc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = frc(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    dir
}

/// Every output file, with the run-time block of JSON sidecars removed.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("out")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut bytes = std::fs::read(&path).unwrap();
        if name.ends_with(".json") {
            let mut v: Value = serde_json::from_slice(&bytes).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("runtime");
            }
            bytes = serde_json::to_vec(&v).unwrap();
        }
        files.insert(name, bytes);
    }
    files
}

fn pipeline(dir: &Path, threads: &str) {
    for cmd in ["simulate-design", "fit-gp", "curve", "sobol", "pli"] {
        ok(dir, &[cmd, "--config", "run.json", "--threads", threads]);
    }
    ok(dir, &["sobol", "--config", "run.json", "--threads", threads, "--flavor", "inverse", "--p", "0.9"]);
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_thread_counts() {
    let runs: Vec<_> = ["1", "1", "4"]
        .iter()
        .map(|t| {
            let dir = workdir();
            pipeline(dir.path(), t);
            snapshot(dir.path())
        })
        .collect();
    for name in ["design.csv", "model.json", "curve.csv", "sobol_aggregated.csv", "sobol_inverse.csv", "pli.csv"] {
        assert!(runs[0].contains_key(name), "{name} missing");
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn sidecar_records_runtime_and_inverse_level() {
    let dir = workdir();
    for cmd in ["simulate-design", "fit-gp"] {
        ok(dir.path(), &[cmd, "--config", "run.json"]);
    }
    ok(dir.path(), &["sobol", "--config", "run.json", "--flavor", "inverse", "--p", "0.9", "--threads", "1"]);
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/sobol_inverse.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "sobol");
    assert_eq!(meta["config"]["sobol"]["p"], 0.9);
    assert_eq!(meta["config"]["sobol"]["flavor"], "inverse");
    assert_eq!(meta["runtime"]["threads"], 1);
    assert!(meta["runtime"]["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(meta["stage_seed"].is_u64());

    let csv = std::fs::read_to_string(dir.path().join("out/sobol_inverse.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "input,flavor,S,S_lo,S_hi,T,T_lo,T_hi");
    // the crossing abscissa 2 − x0 − 0.5·x1 splits its variance 0.8 / 0.2
    let s: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(s.len(), 2);
    assert!((s[0] - 0.8).abs() < 0.15 && (s[1] - 0.2).abs() < 0.15, "{s:?}");
    assert!(!csv.contains('\r'));
}

#[test]
fn resolved_config_materializes_defaults_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let minimal = r#"{"threshold": 2.0, "analytic": {"b0": 0.0, "b1": 1.0, "c": [1.0]},
        "inputs": {"marginals": [{"kind": "gaussian", "mu": 0.0, "sigma": 1.0}], "a_bounds": [0.0, 4.0]}}"#;
    std::fs::write(dir.path().join("min.json"), minimal).unwrap();
    ok(dir.path(), &["oracle", "--config", "min.json"]);
    let resolved: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/oracle.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["curve"]["n"], 10_000);
    assert_eq!(resolved["curve"]["m"], 3_000);
    assert_eq!(resolved["curve"]["n_clt"], 100_000);
    assert_eq!(resolved["sobol"]["n_pf"], 10_000);
    assert_eq!(resolved["pli"]["n"], 100_000);
    assert_eq!(resolved["model"], "out/model.json");
    assert_eq!(resolved["curve"]["a_grid"]["points"], 21);

    let first = std::fs::read(dir.path().join("out/oracle.csv")).unwrap();
    ok(dir.path(), &["oracle", "--config", "out/oracle.resolved.json"]);
    assert_eq!(std::fs::read(dir.path().join("out/oracle.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("quantity,value,method\n"));
    assert!(text.contains("S_inverse[0],1,closed form"));
}

#[test]
fn flags_override_file_values() {
    let dir = workdir();
    ok(dir.path(), &["simulate-design", "--config", "run.json", "--n", "12", "--seed", "3", "--output-dir", "other"]);
    let csv = std::fs::read_to_string(dir.path().join("other/design.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join("other/design.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config"]["design"]["n"], 12);
    // untouched keys keep their file values
    assert_eq!(meta["config"]["curve"]["m"], 60);
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn errors_map_to_exit_codes_and_name_the_key() {
    let dir = workdir();
    let out = frc(dir.path(), &["sobol", "--config", "run.json", "--set", "sobol.npf=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sobol.npf"), "{}", stderr(&out));

    let out = frc(dir.path(), &["curve", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.json"), "{}", stderr(&out));

    let out = frc(dir.path(), &["pli", "--config", "run.json", "--set", "pli.a=null"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pli.a"), "{}", stderr(&out));

    let out = frc(dir.path(), &["oracle", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.csv"), "a,x1,x2,y\n0,1,2,3\n0,1,oops,3\n").unwrap();
    let out = frc(dir.path(), &["fit-gp", "--config", "run.json", "--dataset", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    ok(dir.path(), &["simulate-design", "--config", "run.json"]);
    ok(dir.path(), &["fit-gp", "--config", "run.json"]);
    let out = frc(dir.path(), &["sobol", "--config", "run.json", "--flavor", "pointwise", "--a", "-60"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("degenerate"), "{}", stderr(&out));
}

#[test]
fn berens_runs_on_simulated_data() {
    let dir = workdir();
    ok(dir.path(), &["simulate-design", "--config", "run.json"]);
    let out = frc(dir.path(), &["berens", "--config", "run.json", "--transform", "log"]);
    // negative responses cannot be log-transformed
    assert_eq!(out.status.code(), Some(2));
    ok(dir.path(), &["berens", "--config", "run.json", "--set", r#"berens.transform={"kind":"fixed","lambda":1}"#]);
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/berens.json")).unwrap()).unwrap();
    // y = a + x0 + 0.5 x1 > 2  ⇔  a > 2 − noise: α = 2, β = √1.25
    let alpha = meta["result"]["fit"]["alpha"].as_f64().unwrap();
    let beta = meta["result"]["fit"]["beta"].as_f64().unwrap();
    assert!((alpha - 2.0).abs() < 0.6, "{alpha}");
    assert!((beta - 1.25f64.sqrt()).abs() < 0.6, "{beta}");
}
