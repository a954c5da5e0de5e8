use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_duesenberry"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn fast_config(dir: &Path, paths: usize) -> PathBuf {
    let text = std::fs::read_to_string(config("desk_example51.toml")).unwrap();
    let mut cfg: toml::Table = toml::from_str(&text).unwrap();
    cfg["ensemble"]["paths"] = toml::Value::Integer(paths as i64);
    cfg["grid"]["steps"] = toml::Value::Integer(40);
    let path = dir.join("fast.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn calibrate_writes_table_and_puzzle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["calibrate", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "table1_comparison.csv");
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().count(), 2 + 6);
    let puzzle: serde_json::Value = serde_json::from_str(&read(dir.path(), "puzzle.json")).unwrap();
    assert_eq!(puzzle["pass"], true);
}

#[test]
fn zero_gamma_min_rejected_with_line() {
    let out = run(&["simulate", "--config", config("invalid_gamma_min.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamma_min") && err.contains("line "), "{err}");
}

#[test]
fn unknown_fault_is_a_usage_error() {
    let out = run(&["verify", "--config", config("desk_rentier.toml").to_str().unwrap(), "--inject-fault", "nope"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config(tmp.path(), 120);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["1", "1", "2"]) {
        let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["paths.csv", "coefficients.csv", "run.json"] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f}");
    }
    assert_ne!(read(&dirs[0], "paths.csv"), read(&dirs[2], "paths.csv"));
    let header = read(&dirs[0], "paths.csv");
    assert!(header.lines().next().unwrap().ends_with("seed=1"));
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config(tmp.path(), 120);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let d = tmp.path().join(threads);
        let out = bin()
            .env("DSB_THREADS", threads)
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(read(&d, "paths.csv") + &read(&d, "coefficients.csv"));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn verify_passes_clean_and_fails_under_each_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config(tmp.path(), 200);
    let clean = tmp.path().join("clean");
    let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", clean.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&clean, "verification.json")).unwrap();
    assert_eq!(report["pass"], true);
    for (fault, suite) in [
        ("rate-shift", "no_arbitrage"),
        ("kernel-scale", "clearing"),
        ("weight-perturb", "cocycle"),
        ("drift-shift", "ito_aggregation"),
        ("gain-shock", "joneses"),
        ("terminal-scale", "time_consistency"),
    ] {
        let d = tmp.path().join(fault);
        let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap(), "--inject-fault", fault]);
        assert_eq!(out.status.code(), Some(1), "{fault}");
        let report: serde_json::Value = serde_json::from_str(&read(&d, "verification.json")).unwrap();
        let failed: Vec<&str> = report["suites"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|s| s["pass"] == false)
            .map(|s| s["name"].as_str().unwrap())
            .collect();
        assert!(failed.contains(&suite), "{fault}: {failed:?}");
    }
}

#[test]
fn decompose_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config(tmp.path(), 150);
    let d = tmp.path().join("dec");
    let out = run(&["decompose", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&d, "decomposition.csv");
    assert_eq!(csv.lines().count(), 2 + 40);
    let json: serde_json::Value = serde_json::from_str(&read(&d, "decomposition.json")).unwrap();
    assert!(json["config_hash"].is_string());
}
