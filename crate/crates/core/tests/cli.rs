// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use prefillsim::cli::{EXIT_CAPACITY, EXIT_CONFIG, EXIT_IO, EXIT_OK};

fn prefillsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefillsim"))
        .args(args)
        .env_remove("PREFILLSIM_PRESETS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn simulate_default_sweep_has_six_rows() {
    let out = prefillsim(&["simulate", "--trace", "post-rec", "--variant", "prefillonly", "--policy", "srjf-calibrated"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(prefillsim::sim::REPORT_CSV_HEADER));
    assert_eq!(lines.count(), 6);
}

#[test]
fn credit_on_paged_is_a_capacity_error_listing_ids() {
    let out = prefillsim(&["simulate", "--trace", "credit", "--variant", "paged", "--multipliers", "1"]);
    assert_eq!(code(&out), EXIT_CAPACITY);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ids [0, 1, 2"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn exit_codes_for_config_and_io() {
    assert_eq!(code(&prefillsim(&["simulate", "--gpu", "tpu-v9"])), EXIT_CONFIG);
    assert_eq!(code(&prefillsim(&["simulate", "--bogus-flag"])), EXIT_CONFIG);
    assert_eq!(code(&prefillsim(&["lambda-sweep", "--policy", "fifo"])), EXIT_CONFIG);
    assert_eq!(code(&prefillsim(&["mil", "--out", "/nonexistent-dir/mil.csv"])), EXIT_IO);
    assert_eq!(code(&prefillsim(&["simulate", "--profile", "/nonexistent-dir/p.toml"])), EXIT_IO);
}

#[test]
fn failed_runs_leave_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let path = out.to_str().unwrap();
    assert_eq!(code(&prefillsim(&["simulate", "--lambda", "-1", "--out", path])), EXIT_CONFIG);
    assert_eq!(
        code(&prefillsim(&["simulate", "--trace", "credit", "--variant", "paged", "--out", path])),
        EXIT_CAPACITY
    );
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = prefillsim(&["simulate", "--seed", "7", "--multipliers", "1,3", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&out), EXIT_OK);
        assert!(out.stdout.is_empty());
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn lambda_sweep_rows() {
    let out = prefillsim(&["lambda-sweep", "--lambda", "0,0.5,5"]);
    assert_eq!(code(&out), EXIT_OK);
    let text = stdout(&out);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).take(4).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 0.5, 5.0]);
    // Columns after the label: lambda, qps, mean, p99.
    let min_mean = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    assert_eq!(rows[0][2], min_mean);
    let single = prefillsim(&["lambda-sweep", "--lambda", "2"]);
    assert_eq!(stdout(&single).lines().count(), 2);
}

#[test]
fn fitted_profile_feeds_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("jct.toml");
    let p = profile.to_str().unwrap();
    assert_eq!(code(&prefillsim(&["fit-jct", "--out", p])), EXIT_OK);
    let text = std::fs::read_to_string(&profile).unwrap();
    assert!(text.contains("fit_r2"));
    let out = prefillsim(&["simulate", "--profile", p, "--scoring", "profile", "--multipliers", "2"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_trace_round_trips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let t = trace.to_str().unwrap();
    assert_eq!(code(&prefillsim(&["gen-trace", "--trace", "credit", "--seed", "3", "--out", t])), EXIT_OK);
    let from_file = prefillsim(&["simulate", "--trace", t, "--seed", "3", "--multipliers", "1"]);
    let generated = prefillsim(&["simulate", "--trace", "credit", "--seed", "3", "--multipliers", "1"]);
    assert_eq!(code(&from_file), EXIT_OK, "{}", String::from_utf8_lossy(&from_file.stderr));
    assert_eq!(stdout(&from_file), stdout(&generated));
}

#[test]
fn verify_numerics_reports_exact_equivalence() {
    let out = prefillsim(&["verify-numerics"]);
    assert_eq!(code(&out), EXIT_OK);
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some(prefillsim::numerics::VerifyReport::CSV_HEADER));
    for row in text.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[4].parse::<f64>().unwrap() <= 1e-9);
        assert_eq!(f[5], "true");
    }
}

fn write_gpu_preset(dir: &Path, name: &str, total_memory: u64) {
    let gpu_dir = dir.join("gpu");
    std::fs::create_dir_all(&gpu_dir).unwrap();
    let l4 = include_str!("../../../presets/gpu/l4.toml");
    let text: String = l4
        .lines()
        .map(|l| {
            if l.starts_with("total_memory") {
                format!("total_memory = {total_memory}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    std::fs::write(gpu_dir.join(format!("{name}.toml")), text).unwrap();
}

#[test]
fn memory_equal_to_weights_gives_zero_mil() {
    let dir = tempfile::tempdir().unwrap();
    let weights = prefillsim::presets::model("llama-3.1-8b").unwrap().weight_bytes;
    write_gpu_preset(dir.path(), "tiny", weights);
    let out = Command::new(env!("CARGO_BIN_EXE_prefillsim"))
        .args(["mil", "--model", "llama-3.1-8b", "--gpu", "tiny"])
        .env("PREFILLSIM_PRESETS", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    for row in stdout(&out).lines().skip(1).filter(|l| l.starts_with("mode:")) {
        assert!(row.ends_with(",0,no,no"), "{row}");
    }
}
