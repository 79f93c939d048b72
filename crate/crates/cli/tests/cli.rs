//! End-to-end tests of the `vpsphere` binary: each test spawns the real
//! executable and checks exit codes, stderr wording, and artifact contents.

use std::path::Path;
use std::process::{Command, Output};

fn vpsphere(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpsphere"))
        .args(args)
        .output()
        .expect("spawn vpsphere")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// `key = value` lookup in a metadata file.
fn metadata_value(dir: &Path, key: &str) -> String {
    let text = read(&dir.join("metadata.txt"));
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            if k == key {
                return v.to_string();
            }
        }
    }
    panic!("metadata key {key} not found in {}", dir.display());
}

/// Column values of the last data row of a CSV file.
fn csv_last_row(path: &Path) -> (Vec<String>, Vec<f64>) {
    let text = read(path);
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .expect("csv header")
        .split(',')
        .map(str::to_string)
        .collect();
    let last = lines.filter(|l| !l.trim().is_empty()).next_back().expect("csv data row");
    let values = last
        .split(',')
        .map(|v| v.parse::<f64>().expect("csv number"))
        .collect();
    (header, values)
}

fn column(header: &[String], values: &[f64], name: &str) -> f64 {
    let idx = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("csv column {name} missing from {header:?}"));
    values[idx]
}

// ---------------------------------------------------------------------------

#[test]
fn vacuum_run_writes_all_zero_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("run");
    let out = vpsphere(&[
        "simulate",
        "--datum",
        "vacuum",
        "--T",
        "0.1",
        "--out-dir",
        out_path.to_str().unwrap(),
        "--resolution",
        "4",
        "--radius-nodes",
        "16",
        "--steps-per-slab",
        "4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    assert_eq!(metadata_value(&out_path, "derived.mass"), "0");
    let (header, row) = csv_last_row(&out_path.join("conservation.csv"));
    for name in ["mass", "e_kin", "e_pot", "e_total", "p_support"] {
        assert_eq!(
            column(&header, &row, name),
            0.0,
            "vacuum column {name} must be zero"
        );
    }
    // snapshots exist and the final one holds no samples
    let final_snap = read(&out_path.join("snapshot_final.csv"));
    assert_eq!(final_snap.trim(), "r,w,l,weight,f0");
}

#[test]
fn missing_time_target_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vpsphere(&[
        "simulate",
        "--datum",
        "vacuum",
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("t_target"),
        "stderr must name the missing key: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bogus_knob = 3\n").unwrap();
    let out = vpsphere(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--datum",
        "vacuum",
        "--T",
        "0.1",
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("bogus_knob"),
        "stderr must name the unknown key: {}",
        stderr_of(&out)
    );
}

#[test]
fn polytrope_datum_rejects_repulsive_sign() {
    let dir = tempfile::tempdir().unwrap();
    let out = vpsphere(&[
        "simulate",
        "--datum",
        "polytrope(k=1,central=1)",
        "--sign",
        "repulsive",
        "--T",
        "0.1",
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("attractive"),
        "stderr: {}",
        stderr_of(&out)
    );
}

/// The same configuration must produce byte-identical artifacts on rerun.
#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        [
            "simulate",
            "--datum",
            "indicator-ball",
            "--t-target",
            "1d0",
            "--resolution",
            "8",
            "--radius-nodes",
            "64",
            "--steps-per-slab",
            "16",
            "--table-stride",
            "2",
            "--out-dir",
            out,
        ]
        .map(str::to_string)
    };
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    let out_a = vpsphere(&args(run_a.to_str().unwrap()).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out_a.status.success(), "stderr: {}", stderr_of(&out_a));
    let out_b = vpsphere(&args(run_b.to_str().unwrap()).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out_b.status.success(), "stderr: {}", stderr_of(&out_b));

    for file in [
        "metadata.txt",
        "convergence.csv",
        "conservation.csv",
        "field.csv",
        "snapshot_initial.csv",
        "snapshot_final.csv",
    ] {
        let a = std::fs::read(run_a.join(file)).unwrap();
        let b = std::fs::read(run_b.join(file)).unwrap();
        assert_eq!(a, b, "artifact {file} differs between identical runs");
    }
}

/// steady-state writes a datum table that simulate can consume, with
/// matching mass.
#[test]
fn steady_state_table_round_trips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let eq_dir = dir.path().join("eq");
    let out = vpsphere(&[
        "steady-state",
        "--k",
        "1",
        "--central-value",
        "1",
        "--out-dir",
        eq_dir.to_str().unwrap(),
        "--table-nodes",
        "41",
        "--profile-nodes",
        "65",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let m_star: f64 = metadata_value(&eq_dir, "m_star").parse().unwrap();
    assert!(m_star > 0.0);
    // virial identity holds for the built state
    let virial: f64 = metadata_value(&eq_dir, "virial_residual").parse().unwrap();
    let e_kin: f64 = metadata_value(&eq_dir, "e_kin").parse().unwrap();
    assert!(virial.abs() <= 2e-2 * e_kin.abs(), "virial {virial} vs e_kin {e_kin}");

    let profile = read(&eq_dir.join("profile.csv"));
    assert!(profile.starts_with("r,margin,mass,field"));

    let table = eq_dir.join("datum.table");
    let run_dir = dir.path().join("run");
    let datum_arg = format!("table:{}", table.display());
    let out = vpsphere(&[
        "simulate",
        "--datum",
        &datum_arg,
        "--t-target",
        "0.2tdyn",
        "--resolution",
        "8",
        "--radius-nodes",
        "64",
        "--steps-per-slab",
        "16",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let mass: f64 = metadata_value(&run_dir, "derived.mass").parse().unwrap();
    assert!(
        (mass - m_star).abs() <= 0.05 * m_star,
        "table-datum mass {mass} vs equilibrium mass {m_star}"
    );
}

#[test]
fn verify_default_battery_passes() {
    let out = vpsphere(&["verify"]);
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        stdout_of(&out),
        stderr_of(&out)
    );
    let text = stdout_of(&out);
    assert!(text.contains("PASS"), "stdout: {text}");
    assert!(!text.contains("FAIL"), "stdout: {text}");
    assert!(text.contains("properties passed"), "stdout: {text}");
}

/// A deliberately degraded configuration must be caught, and the failure
/// must name the property that detected it.
#[test]
fn verify_flags_a_coarse_misconfiguration() {
    let out = vpsphere(&[
        "verify",
        "--steps-per-slab",
        "1",
        "--table-stride",
        "1",
        "--guard-tol",
        "inf",
    ]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.contains("flow-inverse"),
        "stderr must name the failing property: {err}"
    );
}

/// diagnose on a run's final snapshot reproduces the sample-sum diagnostics
/// of the run's own conservation report.
#[test]
fn diagnose_matches_conservation_report() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = vpsphere(&[
        "simulate",
        "--datum",
        "indicator-ball",
        "--t-target",
        "1d0",
        "--resolution",
        "8",
        "--radius-nodes",
        "64",
        "--steps-per-slab",
        "16",
        "--table-stride",
        "2",
        "--report-stride",
        "1",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let snap = run_dir.join("snapshot_final.csv");
    let out = vpsphere(&["diagnose", "--snapshot", snap.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let diag_value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| {
                let (k, v) = l.split_once(" = ")?;
                (k == key).then(|| v.parse::<f64>().expect("diagnose number"))
            })
            .unwrap_or_else(|| panic!("diagnose key {key} missing:\n{text}"))
    };

    let (header, last) = csv_last_row(&run_dir.join("conservation.csv"));
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    assert!(rel(diag_value("mass"), column(&header, &last, "mass")) < 1e-9);
    assert!(rel(diag_value("e_kin"), column(&header, &last, "e_kin")) < 1e-9);
    assert!(rel(diag_value("p_support"), column(&header, &last, "p_support")) < 1e-9);
}

#[test]
fn perturb_writes_a_consumable_table_and_caps_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("kick");
    let out = vpsphere(&[
        "perturb",
        "--k",
        "1",
        "--central-value",
        "1",
        "--mode",
        "radial-kick",
        "--amplitude",
        "0.1",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--table-nodes",
        "33",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let table = out_dir.join("datum.table");
    let datum = vpsphere_core::read_table_file(&table).expect("perturbed table readable");
    let declared: f64 = metadata_value(&out_dir, "mass").parse().unwrap();
    assert!(
        (datum.mass - declared).abs() <= 0.05 * declared,
        "table mass {} vs declared {declared}",
        datum.mass
    );

    let out = vpsphere(&[
        "perturb",
        "--k",
        "1",
        "--central-value",
        "1",
        "--mode",
        "radial-kick",
        "--amplitude",
        "0.9",
        "--out-dir",
        dir.path().join("big").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "oversized amplitude must be a config error");
}
