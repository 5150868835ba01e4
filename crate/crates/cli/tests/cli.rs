use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meanfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanfield")).args(args).output().expect("binary runs")
}

const SMOKE: &str = r#"
name = "smoke"
controller = "stabilize"
duration = 0.5
diffusion = 1.0
initial = "1 + 0.5*cos(pi*x)"
target = "1"

[domain]
lengths = [1.0]
cells = [64]

[solver]
dt = 1e-3

[tolerances]
final_error = 1e-2
min_min_value = 1e-6
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = meanfield(&["stabilize", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn stabilize_smoke_run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dir = tmp.path().join("run");
    let out = meanfield(&["stabilize", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "errors.csv", "final.csv", "summary.json", "metadata.json", "scenario.toml"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let final_csv = fs::read_to_string(dir.join("final.csv")).unwrap();
    assert!(final_csv.starts_with("cell,x,value\n"));
    assert_eq!(final_csv.lines().count(), 65);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["checks"].as_array().unwrap().len(), 2);
}

#[test]
fn failed_check_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let strict = SMOKE.replace("final_error = 1e-2", "final_error = 1e-30");
    let cfg = write_config(tmp.path(), "strict.toml", &strict);
    let out = meanfield(&["stabilize", "--config", &cfg, "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL final_error"));
}

#[test]
fn unknown_tolerance_and_mismatched_controller_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", &SMOKE.replace("final_error = 1e-2", "gap = 1.0"));
    assert_eq!(meanfield(&["stabilize", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "b.toml", SMOKE);
    assert_eq!(meanfield(&["spectrum", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn disconnected_graph_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "g.toml",
        r#"
name = "split"
duration = 1.0
[graph]
edges = [[1, 2], [3, 4]]
[ctmc]
initial = [1.0, 0.0, 0.0, 0.0]
target = [0.25, 0.25, 0.25, 0.25]
"#,
    );
    let out = meanfield(&["ctmc-plan", "--config", &cfg, "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error in ctmc: graph is not strongly connected"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "p.toml",
        r#"
name = "particles"
duration = 0.1
diffusion = [0.5, 0.5]
[domain]
lengths = [1.0]
cells = [16]
[graph]
edges = [[1, 2], [2, 1]]
[hybrid]
targets = ["1 + 0.5*cos(pi*x)", "1"]
target_masses = [0.5, 0.5]
[particles]
count = 2000
bins = [8]
[solver]
dt = 1e-2
"#,
    );
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = meanfield(&["particles", "--config", &cfg, "--seed", "42", "--out", dir.to_str().unwrap()]);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
            dir
        })
        .collect();
    let mut names: Vec<_> = fs::read_dir(&runs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        assert_eq!(fs::read(runs[0].join(&n)).unwrap(), fs::read(runs[1].join(&n)).unwrap(), "{n:?} differs");
    }
    let other = tmp.path().join("c");
    meanfield(&["particles", "--config", &cfg, "--seed", "43", "--out", other.to_str().unwrap()]);
    assert_ne!(fs::read(runs[0].join("particles.csv")).unwrap(), fs::read(other.join("particles.csv")).unwrap());
}
