use std::path::Path;
use std::process::Command;

fn brwre(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_brwre")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn environment_centering_and_pn_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.json");
    let tilt = dir.path().join("tilt.json");
    let table = dir.path().join("table.json");
    let out = brwre(&["gen-env", "--x-min", "-200", "--x-max", "40", "--seed", "3", "--out", s(&env)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = brwre(&["tilt", "--out", s(&tilt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = brwre(&["centering", "--env", s(&env), "--tilt", s(&tilt), "--n", "16", "--out", s(&table)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = |threads: &str| brwre(&["--threads", threads, "pn", "--table", s(&table), "--reps", "20000", "--seed", "9"]);
    let one = run("1");
    let two = run("2");
    assert!(one.status.success());
    assert_eq!(one.stdout, two.stdout);
    let v: serde_json::Value = serde_json::from_slice(&one.stdout).unwrap();
    let p = v["p_hat"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
}

#[test]
fn bad_input_exits_with_code_two() {
    let out = brwre(&["gen-env", "--x-min", "5", "--x-max", "1", "--seed", "1", "--out", "/nonexistent/x.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = brwre(&["pn", "--table", "/nonexistent/table.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_a_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.json");
    let rec = dir.path().join("run.json");
    assert!(brwre(&["gen-env", "--x-min", "-80", "--x-max", "40", "--seed", "1", "--out", s(&env)]).status.success());
    let out = brwre(&["simulate", "--env", s(&env), "--n", "12", "--prune", "30", "--seed", "2", "--out", s(&rec)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = brwre::brw::RunRecord::from_json(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    assert!(r.hit(12).is_some());
}
