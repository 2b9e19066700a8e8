use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn neurosc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurosc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic_and_carries_the_manifest() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = neurosc(&["simulate", "--seed", "5", "--out", out, "--svg"], d.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["input.csv", "hidden.csv", "output.csv", "network.json", "output.svg"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between reruns");
    }
    let m = json_file(&d.path().join("a/manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["files"].as_array().unwrap().len(), 5);
    let net = json_file(&d.path().join("a/network.json"));
    assert_eq!(net["config_hash"], m["config_hash"]);
}

#[test]
fn zero_input_gives_the_constant_bias() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("c.json"),
        r#"{"seed": 2, "simulate": {"network": {"kind": "random", "layers": 3, "act": "sine", "zero_bias": true}, "input": {"kind": "zero"}}}"#,
    )
    .unwrap();
    let o = neurosc(&["simulate", "--config", "c.json", "--out", "z"], d.path());
    assert_eq!(code(&o), 0);
    let c = json_file(&d.path().join("z/network.json"))["data"]["c"].clone();
    let c: Vec<f64> = serde_json::from_value(c).unwrap();
    let text = std::fs::read_to_string(d.path().join("z/output.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x0,x1"));
    for line in lines {
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals, c);
    }
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), "{\n  \"seed\": 1,\n  \"simulat\": {}\n}").unwrap();
    let o = neurosc(&["simulate", "--config", "bad.json"], d.path());
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("simulat") && err.contains("line 3"), "{err}");

    std::fs::write(d.path().join("syntax.json"), "{\"seed\": 1,").unwrap();
    assert_eq!(code(&neurosc(&["simulate", "--config", "syntax.json"], d.path())), 2);
    assert_eq!(code(&neurosc(&["simulate"], d.path())), 2, "missing seed");
    assert_eq!(code(&neurosc(&["simulate", "--config", "missing.json", "--seed", "1"], d.path())), 2);
    assert_eq!(code(&neurosc(&["frobnicate"], d.path())), 2);
    assert!(!d.path().join("out").exists());
}

#[test]
fn verify_reports_json_and_rejects_bad_filters() {
    let d = tempfile::tempdir().unwrap();
    let o = neurosc(&["verify", "lemma1", "--seed", "0", "--out", "v"], d.path());
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["suites"][0]["suite"], "lemma1");
    assert_eq!(v["suites"][0]["checks"].as_array().unwrap().len(), 3);
    assert!(d.path().join("v/verify.json").exists());
    assert_eq!(code(&neurosc(&["verify", "", "--seed", "0"], d.path())), 2);
    assert_eq!(code(&neurosc(&["verify", "lemma2", "--seed", "0"], d.path())), 2);
}

#[test]
fn tiny_budget_exits_4_naming_the_stage() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), r#"{"seed": 0, "compile": {"settings": {"eps_total": 1e-9}}}"#).unwrap();
    let o = neurosc(&["compile", "--config", "c.json", "--out", "c"], d.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage A"));
    let s = json_file(&d.path().join("c/summary.json"));
    assert_eq!(s["data"]["miss"]["stage"], "A");
    assert!(d.path().join("c/stages.csv").exists() && !d.path().join("c/compiled.json").exists());
}

#[test]
fn delay_and_zero_operators_compile() {
    let d = tempfile::tempdir().unwrap();
    let o = neurosc(&["compile", "--seed", "0", "--out", "delay"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json_file(&d.path().join("delay/summary.json"));
    let stages = s["data"]["stages"].as_array().unwrap();
    assert_eq!(stages.iter().map(|x| x["stage"].as_str().unwrap()).collect::<Vec<_>>(), ["A", "B", "C", "D"]);
    assert!(s["data"]["end_to_end_err"].as_f64().unwrap() <= s["data"]["eps_total"].as_f64().unwrap());
    let v = std::fs::read_to_string(d.path().join("delay/validation.csv")).unwrap();
    assert!(v.starts_with("input_id,t,target,predicted,abs_err\n"));
    assert!(d.path().join("delay/compiled.json").exists());

    std::fs::write(d.path().join("z.json"), r#"{"seed": 0, "compile": {"operator": {"kind": "zero", "dim": 1}}}"#).unwrap();
    assert_eq!(code(&neurosc(&["compile", "--config", "z.json", "--out", "zero"], d.path())), 0);
}

#[test]
fn anticausal_operator_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("a.json"),
        r#"{"seed": 0, "compile": {"operator": {"kind": "anticausal", "dim": 1, "lead": 0.1}}}"#,
    )
    .unwrap();
    assert_eq!(code(&neurosc(&["compile", "--config", "a.json"], d.path())), 2);
}

#[test]
fn fk_sweep_and_reconstruct_write_csv() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&neurosc(&["fk-sweep", "--seed", "0", "--out", "fk", "--svg"], d.path())), 0);
    let csv = std::fs::read_to_string(d.path().join("fk/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("eps_order,D,max_offdiag_ratio"));
    assert_eq!(csv.lines().count(), 5);
    assert!(d.path().join("fk/sweep.svg").exists());
    let m = json_file(&d.path().join("fk/manifest.json"));
    assert!(m["summary"]["energy_halving_ratio"].as_f64().unwrap() >= 3.5);

    assert_eq!(code(&neurosc(&["reconstruct", "--seed", "0", "--out", "rc"], d.path())), 0);
    let m = json_file(&d.path().join("rc/manifest.json"));
    assert!(m["summary"]["validated_err"].as_f64().unwrap() <= m["summary"]["target_err"].as_f64().unwrap());
    let rc = std::fs::read_to_string(d.path().join("rc/reconstruction.csv")).unwrap();
    assert!(rc.starts_with("t,u0,rec0\n"));
}
