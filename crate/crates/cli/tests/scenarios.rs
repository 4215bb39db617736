use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BUNDLED: &[(&str, &str)] = &[
    ("converge", "free-particle-convergence"),
    ("covsym", "flat-reduction"),
    ("pathint", "oscillator-triangle"),
    ("geodesic", "sphere-geodesic"),
    ("covsym", "exponential-line"),
    ("semiclassical", "oscillator-semiclassical"),
    ("transform", "wick-transform"),
    ("quantize", "gaussian-quantize"),
    ("propagate", "oscillator-propagate"),
    ("validate", "diagnostics"),
];

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn pathslice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathslice")).args(args).env("PATHSLICE_THREADS", "2").output().unwrap()
}

fn run_into(cmd: &str, scenario: &Path, out: &Path) -> Output {
    pathslice(&[cmd, "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn bundled_scenarios_pass() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, name) in BUNDLED {
        let dir = tmp.path().join(name);
        let out = run_into(cmd, &scenario(name), &dir);
        assert_eq!(out.status.code(), Some(0), "{name}: {}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
        let m = manifest(&dir);
        assert_eq!(m["passed"], true, "{name}");
        assert_eq!(m["command"], *cmd);
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
        assert!(!m["checks"].as_array().unwrap().is_empty(), "{name} has no checks");
        for f in m["files"].as_array().unwrap() {
            assert!(dir.join(f.as_str().unwrap()).is_file());
        }
    }
}

#[test]
fn free_particle_order_is_near_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into("converge", &scenario("free-particle-convergence"), tmp.path());
    assert!(out.status.success());
    let order = manifest(tmp.path())["summary"]["order"].as_f64().unwrap();
    assert!((order - 1.0).abs() < 0.2, "{order}");
    let csv = std::fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("N,mesh,error,norm"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn flat_reduction_column_is_small() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_into("covsym", &scenario("flat-reduction"), tmp.path()).status.success());
    let csv = std::fs::read_to_string(tmp.path().join("flat_reduction.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.ends_with("_diff")).map(|(i, _)| i).collect();
    assert_eq!(cols.len(), 2);
    for line in csv.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols.iter().all(|&i| cells[i] <= 1e-6), "{line}");
    }
}

#[test]
fn outputs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, name) in [("converge", "free-particle-convergence"), ("pathint", "oscillator-triangle"), ("quantize", "gaussian-quantize")] {
        let (a, b) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        assert!(run_into(cmd, &scenario(name), &a).status.success());
        assert!(run_into(cmd, &scenario(name), &b).status.success());
        let files = manifest(&a)["files"].as_array().unwrap().clone();
        for f in files.iter().map(|f| f.as_str().unwrap()).filter(|f| *f != "timing.csv") {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{name}/{f}");
        }
    }
}

#[test]
fn dumps_decode() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_into("quantize", &scenario("gaussian-quantize"), tmp.path()).status.success());
    for f in ["kernel.bin", "symbol.bin"] {
        pathslice::dump::decode(&std::fs::read(tmp.path().join(f)).unwrap()).unwrap();
    }
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(scenario("oscillator-propagate")).unwrap();
    let cases = [
        (base.replace("n = 128", "n = 100"), "grid.n"),
        (base.replace("[packet]", "[packet]\nsigma = 2.0"), "packet.sigma"),
        (base.replace("f = \"(p^2 + q^2)/2\"", "f = \"(p^2 + q^2/2\""), "hamiltonian.f"),
        (base.replace("t1 = 1.0", "t1 = \"one\""), "partition.t1"),
        (base.replace("[packet]\nq0 = 1.0\nwidth = 1.0\n", ""), "packet"),
    ];
    for (i, (text, key)) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = run_into("propagate", &path, &tmp.path().join(format!("out{i}")));
        assert_eq!(out.status.code(), Some(2), "case {i}");
        let err = error_json(&out);
        assert_eq!(err["error"]["kind"], "config");
        assert_eq!(err["error"]["key"], *key, "case {i}");
        assert!(!tmp.path().join(format!("out{i}")).exists());
    }
}

#[test]
fn missing_scenario_file_exits_2() {
    let out = pathslice(&["quantize", "--scenario", "/nonexistent/x.toml", "--check"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "io");
}

#[test]
fn failed_check_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("oscillator-propagate")).unwrap().replace("final_error = 1e-2", "final_error = 1e-9");
    let path = tmp.path().join("strict.toml");
    std::fs::write(&path, text).unwrap();
    let out = run_into("propagate", &path, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(manifest(&tmp.path().join("out"))["passed"], false);
}

#[test]
fn check_flag_validates_without_running() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = pathslice(&["converge", "--scenario", scenario("free-particle-convergence").to_str().unwrap(), "--out", dir.to_str().unwrap(), "--check"]);
    assert!(out.status.success());
    assert!(!dir.exists());
    // geodesic needs a chart
    let out = pathslice(&["geodesic", "--scenario", scenario("diagnostics").to_str().unwrap(), "--check"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["key"], "chart");
}

#[test]
fn batch_runs_each_scenario_into_its_own_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (scenario("flat-reduction"), scenario("gaussian-quantize"));
    let out = pathslice(&["quantize", "--scenario", a.to_str().unwrap(), "--scenario", b.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("flat-reduction/manifest.json").is_file());
    assert!(tmp.path().join("gaussian-quantize/manifest.json").is_file());
    let out = pathslice(&["quantize", "--scenario", a.to_str().unwrap(), "--scenario", a.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["key"], "output.dir");
}

#[test]
fn seed_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pathslice(&["validate", "--scenario", scenario("diagnostics").to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--seed", "11"]);
    assert!(out.status.success());
    assert_eq!(manifest(tmp.path())["seed"], 11);
}
