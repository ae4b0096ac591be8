//! End-to-end tests of the binary: file outputs, byte-level reproducibility,
//! and the exit-code contract (0 ok, 1 I/O, 2 usage, 3 divergence,
//! 4 bound conditions not applicable).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_erasure-fl"))
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("erasure_fl_cli_tests")
        .join(format!("{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn generate_writes_n_files_deterministically() {
    let dir = fresh_dir("gen");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        run_ok(&[
            "generate",
            "quadratic-noniid",
            "--devices",
            "10",
            "--per-device",
            "100",
            "--seed",
            "7",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    for i in 0..10 {
        let a = read(&out_a.join(format!("device_{i}.csv")));
        let b = read(&out_b.join(format!("device_{i}.csv")));
        assert_eq!(a, b, "device {i} not byte-identical");
        assert_eq!(a.lines().count(), 101, "expected 100 rows plus header");
    }
    assert!(out_a.join("manifest.json").exists());
}

#[test]
fn generate_uniform_single_device_holds_whole_pool() {
    let dir = fresh_dir("gen_uniform");
    run_ok(&[
        "generate",
        "uniform",
        "--devices",
        "1",
        "--per-device",
        "60",
        "--seed",
        "3",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let csv = read(&dir.join("device_0.csv"));
    assert_eq!(csv.lines().count(), 61);
    assert!(!dir.join("device_1.csv").exists());
}

#[test]
fn run_writes_expected_rows_and_reruns_identically() {
    let dir = fresh_dir("run");
    let args = [
        "run",
        "--dataset",
        "linear",
        "--devices",
        "3",
        "--per-device",
        "200",
        "--slopes",
        "1,3,5",
        "--strategy",
        "stale-reuse",
        "--epsilon",
        "0.3",
        "--eta",
        "0.005",
        "--tau",
        "1",
        "--rounds",
        "300",
        "--seed",
        "1",
    ];
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let mut full: Vec<&str> = args.to_vec();
        full.push("--out-dir");
        full.push(out.to_str().unwrap());
        run_ok(&full);
    }
    let metrics = read(&out_a.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 301, "header plus 300 rounds");
    assert!(metrics.starts_with(
        "round,strategy,epsilon,mse_train,mse_test,delta,delta_bar,received_count,pattern_bits"
    ));
    assert_eq!(metrics, read(&out_b.join("metrics.csv")));

    // Rerun from the manifest alone.
    let out_c = dir.join("c");
    run_ok(&[
        "run",
        "--config",
        out_a.join("manifest.json").to_str().unwrap(),
        "--out-dir",
        out_c.to_str().unwrap(),
    ]);
    assert_eq!(metrics, read(&out_c.join("metrics.csv")));
}

#[test]
fn compare_at_zero_epsilon_gives_identical_columns() {
    let dir = fresh_dir("compare");
    run_ok(&[
        "compare",
        "--strategies",
        "error-free,memoryless,stale-reuse",
        "--dataset",
        "linear",
        "--devices",
        "3",
        "--per-device",
        "100",
        "--epsilon",
        "0",
        "--eta",
        "0.01",
        "--rounds",
        "50",
        "--seed",
        "5",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let metrics = read(&dir.join("metrics.csv"));
    let mut columns: Vec<Vec<(String, String)>> = Vec::new();
    for line in metrics.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let (round, strategy, mse) = (fields[0], fields[1], fields[3]);
        if strategy == "error-free" {
            columns.push(vec![(round.to_string(), mse.to_string())]);
        } else {
            let idx: usize = round.parse::<usize>().unwrap() - 1;
            columns[idx].push((round.to_string(), mse.to_string()));
        }
    }
    assert_eq!(columns.len(), 50);
    for row in &columns {
        assert_eq!(row.len(), 3, "each round appears once per strategy");
        assert!(row.iter().all(|(_, m)| m == &row[0].1));
    }
}

#[test]
fn analyze_pmf_zero_epsilon_is_a_point_mass() {
    let out = run_ok(&["analyze", "pmf", "--epsilon", "0", "--params", "1.0,2.0,3.0"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let atoms = report["atoms"].as_array().unwrap();
    assert_eq!(atoms.len(), 8);
    let with_mass: Vec<_> = atoms
        .iter()
        .filter(|a| a["probability"].as_f64().unwrap() > 0.0)
        .collect();
    assert_eq!(with_mass.len(), 1);
    assert_eq!(with_mass[0]["pattern"], "111");
    assert_eq!(with_mass[0]["probability"], 1.0);
    assert_eq!(with_mass[0]["point"][0], 2.0);
}

#[test]
fn analyze_bound_rejects_large_epsilon_with_exit_4() {
    let out = bin()
        .args([
            "analyze",
            "bound",
            "--dataset",
            "quadratic-noniid",
            "--devices",
            "3",
            "--per-device",
            "50",
            "--epsilon",
            "0.9",
            "--rounds",
            "50",
            "--seed",
            "2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mu/(2L)"), "stderr: {stderr}");
}

#[test]
fn analyze_bound_emits_overlay_rows_in_regime() {
    let dir = fresh_dir("bound");
    let out_file = dir.join("bound.json");
    run_ok(&[
        "analyze",
        "bound",
        "--dataset",
        "quadratic-noniid",
        "--devices",
        "5",
        "--per-device",
        "80",
        "--epsilon",
        "0.05",
        "--rounds",
        "100",
        "--seed",
        "2",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&read(&out_file)).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 100);
    assert_eq!(report["holds_everywhere"], true);
}

#[test]
fn analyze_inequalities_reports_zero_violations() {
    let out = run_ok(&[
        "analyze",
        "inequalities",
        "--dataset",
        "quadratic-noniid",
        "--devices",
        "4",
        "--per-device",
        "60",
        "--pairs",
        "200",
        "--seed",
        "3",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["total_violations"], 0);
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().args(["run", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["run", "--strategy", "bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_1() {
    let out = bin()
        .args([
            "run",
            "--dataset",
            "csv",
            "--devices",
            "1",
            "--csv-train",
            "/nonexistent/never.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_3() {
    let dir = fresh_dir("diverge");
    let out = bin()
        .args([
            "run",
            "--dataset",
            "linear",
            "--devices",
            "2",
            "--per-device",
            "30",
            "--slopes",
            "5",
            "--x-lo",
            "10",
            "--x-hi",
            "20",
            "--eta",
            "1e12",
            "--rounds",
            "50",
            "--out-dir",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("round"), "stderr: {stderr}");
}

#[test]
fn short_packet_flags_set_epsilon_from_the_formula() {
    let dir = fresh_dir("packet");
    run_ok(&[
        "run",
        "--dataset",
        "linear",
        "--devices",
        "2",
        "--per-device",
        "40",
        "--slopes",
        "1,2",
        "--packet-k",
        "100",
        "--packet-n",
        "200",
        "--gamma",
        "0.5",
        "--eta",
        "0.01",
        "--rounds",
        "20",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap();
    let eps = manifest["config"]["epsilon"][0].as_f64().unwrap();
    // Frozen oracle value for (n=200, k=100, gamma=0.5).
    assert!((eps - 0.05261286194636211).abs() < 1e-12, "eps {eps}");

    // The two channel flags cannot be mixed.
    let out = bin()
        .args([
            "run",
            "--packet-k",
            "100",
            "--packet-n",
            "200",
            "--gamma",
            "0.5",
            "--epsilon",
            "0.3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
