//! End-to-end checks of the `tfk` binary: argument handling, exit codes,
//! and a small simulate round trip through real files.

use std::process::{Command, Output};

use tfk_core::grid::{GridSpec, Tissue, TissueMap};
use tfk_core::io;

fn tfk() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tfk"));
    cmd.env_remove("TFK_THREADS");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning tfk")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = run(tfk().arg("--help"));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["simulate", "fit", "train", "generate", "sweep", "evaluate", "demo"] {
        assert!(text.contains(sub), "--help should mention {sub}");
    }
}

#[test]
fn version_exits_zero() {
    let out = run(tfk().arg("--version"));
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(tfk().arg("transmogrify"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_required_flag_names_the_flag() {
    let out = run(tfk().args(["simulate", "--rho", "0.03"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--tissue"));
}

#[test]
fn malformed_seed_point_is_rejected() {
    let out = run(tfk().args(["simulate", "--seed", "1,2"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("x,y,z"));
}

#[test]
fn bad_tfk_threads_env_is_a_usage_error() {
    let out = run(tfk().env("TFK_THREADS", "zero").args(["demo", "--seed", "1", "--out", "/tmp"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("TFK_THREADS"));
}

#[test]
fn zero_threads_flag_is_rejected_by_the_parser() {
    let out = run(tfk().args(["--threads", "0", "demo", "--seed", "1", "--out", "/tmp"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_tissue_file_exits_one_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(tfk().args([
        "simulate",
        "--tissue", "/nonexistent/brain.u8",
        "--rho", "0.03",
        "--d", "0.28",
        "--seed", "4.5,4.5,4.5",
        "--sigma", "1.0",
        "--dt", "0.25",
        "--t-end", "2",
        "--snapshot-every", "1",
        "--out", dir.path().to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("/nonexistent/brain.u8"));
}

#[test]
fn simulate_round_trip_writes_snapshots_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GridSpec::isotropic(10, 1.0).unwrap();
    let tissue = TissueMap::new(spec, Tissue::White).unwrap();
    let tissue_path = dir.path().join("tissue.u8");
    io::write_tissue(&tissue_path, &tissue).unwrap();
    let out_dir = dir.path().join("run");

    let out = run(tfk().args([
        "simulate",
        "--tissue", tissue_path.to_str().unwrap(),
        "--rho", "0.05",
        "--d", "0.2",
        "--seed", "4.5,4.5,4.5",
        "--sigma", "1.0",
        "--dt", "0.25",
        "--t-end", "4",
        "--snapshot-every", "2",
        "--out", out_dir.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    for name in ["conc_t0.f32", "conc_t2.f32", "conc_t4.f32"] {
        let snap = io::read_scalar(&out_dir.join(name)).unwrap();
        assert_eq!(*snap.spec(), spec);
        assert!(snap.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let first = io::read_scalar(&out_dir.join("conc_t0.f32")).unwrap();
    let last = io::read_scalar(&out_dir.join("conc_t4.f32")).unwrap();
    assert!(
        last.data().iter().sum::<f64>() > first.data().iter().sum::<f64>(),
        "tumor mass should grow over four days"
    );

    let manifest: serde_json::Value =
        io::read_json_config(&out_dir.join("run_manifest.json")).unwrap();
    assert_eq!(manifest["command"], "simulate");
    let digests = manifest["input_digests"].as_object().unwrap();
    assert_eq!(digests.len(), 2, "payload and sidecar digests expected");
}
