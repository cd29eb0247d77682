use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stochbt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochbt")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = stochbt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_on_small_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["bench", "--n", "16", "--out", "sys"]);
    for f in ["manifest.json", "A.mtx", "B.mtx", "C.mtx", "N1.mtx", "summary.json"] {
        assert!(dir.join("sys").join(f).exists(), "{f}");
    }
    ok(dir, &["gramians", "--system", "sys", "--out", "gram"]);
    let diag = json(&dir.join("gram/diagnostics.json"));
    assert_eq!(diag["passed"], Value::Bool(true));
    assert_eq!(diag["observable"]["n"], Value::from(9));

    ok(dir, &["reduce", "--system", "sys", "--gramians", "gram", "--order", "4", "--out", "red"]);
    let info = json(&dir.join("red/reduce.json"));
    assert_eq!(info["r"], Value::from(4));
    let manifest = json(&dir.join("red/manifest.json"));
    assert_eq!(manifest["n"], Value::from(4));

    ok(dir, &["bounds", "--system", "sys", "--gramians", "gram", "--reduced", "red", "--horizon", "inf", "--out", "b/bounds.json"]);
    let bounds = json(&dir.join("b/bounds.json"));
    assert_eq!(bounds["certificate"]["passed"], Value::Bool(true));
    assert!(bounds["report"]["tail_coefficient"].as_f64().unwrap() > 0.0);

    ok(dir, &[
        "simulate", "--system", "sys", "--reduced", "red", "--gramians", "gram", "--mode", "closed", "--T", "1", "--dt",
        "1e-2", "--paths", "50", "--seed", "3", "--out", "sim",
    ]);
    let summary = json(&dir.join("sim/summary.json"));
    assert_eq!(summary["bound_holds"], Value::Bool(true));
    assert!(dir.join("sim/paths.csv").exists());
    assert!(dir.join("sim/moments.csv").exists());

    ok(dir, &["simulate", "--system", "sys", "--reduced", "red", "--mode", "reduced-feedback", "--control", "zero", "--T", "5", "--out", "fb"]);
    let fb = json(&dir.join("fb/summary.json"));
    assert!(fb["final_output_energy"].as_f64().unwrap() < fb["initial_output_energy"].as_f64().unwrap());

    let too_large = stochbt(dir, &["reduce", "--system", "sys", "--gramians", "gram", "--order", "30", "--out", "x"]);
    assert_eq!(too_large.status.code(), Some(3));
}

#[test]
fn exit_codes_for_input_and_pending_solver() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(stochbt(dir, &["gramians", "--system", "missing", "--out", "g"]).status.code(), Some(2));
    assert_eq!(stochbt(dir, &["simulate", "--system", "missing"]).status.code(), Some(2));
    ok(dir, &["bench", "--n", "9", "--out", "sys"]);
    let pending = stochbt(dir, &["gramians", "--system", "sys", "--strategy", "external_sdp", "--sdp-dir", "sdp", "--out", "g"]);
    assert_eq!(pending.status.code(), Some(4));
    assert!(dir.join("sdp/lmi.json").exists());
}
