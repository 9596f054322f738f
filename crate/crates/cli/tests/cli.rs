use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swarmplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarmplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_circle(dir: &Path) -> std::path::PathBuf {
    let preset = swarmplan(&["preset", "circle-swap", "--param", "4"]);
    assert!(preset.status.success());
    let text = stdout(&preset).replacen("duration = 40.0", "duration = 8.0", 1);
    let path = dir.join("circle.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn preset_prints_scenario_toml() {
    for kind in ["circle-swap", "density", "line", "drift"] {
        let o = swarmplan(&["preset", kind]);
        assert!(o.status.success(), "{kind}");
        let text = stdout(&o);
        assert!(text.contains("[[agents]]"), "{kind}: {text}");
    }
    let bad = swarmplan(&["preset", "line", "--param", "2.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_then_audit_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_circle(dir.path());
    let out = dir.path().join("out");
    let run = swarmplan(&["run", scenario.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = stdout(&run);
    assert!(text.contains("collisions      0"), "{text}");
    for name in ["metrics.csv", "trace.csv", "network.csv", "replans.csv", "timing.csv", "world.grid"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let audit = swarmplan(&[
        "audit",
        out.join("trace.csv").to_str().unwrap(),
        "--world",
        out.join("world.grid").to_str().unwrap(),
    ]);
    assert!(audit.status.success());
    assert!(stdout(&audit).contains("collisions: 0"));
}

#[test]
fn runs_with_the_same_seed_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_circle(dir.path());
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let run = swarmplan(&["run", scenario.to_str().unwrap(), "-o", out.to_str().unwrap(), "--seed", "3"]);
        assert!(run.status.success());
        traces.push(fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn audit_flags_overlapping_agents() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut text = String::from("clock,id,true_x,true_y,true_z,yaw,believed_x,believed_y,believed_z,epoch,reason,wall_ms\n");
    for k in 0..5 {
        let t = k as f64 * 0.1;
        text.push_str(&format!("{t},0,0,0,1,0,0,0,1,0,,\n"));
        text.push_str(&format!("{t},1,0.1,0,1,0,0.1,0,1,0,,\n"));
    }
    fs::write(&trace, text).unwrap();
    let audit = swarmplan(&["audit", trace.to_str().unwrap()]);
    assert_eq!(audit.status.code(), Some(1), "{}", String::from_utf8_lossy(&audit.stderr));
    assert!(stdout(&audit).contains("collisions: 1"));
}

#[test]
fn sweep_prints_one_row_per_count() {
    let o = swarmplan(&["sweep", "--agents", "1,2", "--duration", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3, "{text}");
}

#[test]
fn missing_scenario_is_an_error() {
    let o = swarmplan(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
