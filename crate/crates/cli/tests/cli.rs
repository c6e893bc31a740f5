use std::fs;
use std::path::Path;
use std::process::Command;

fn coarsenlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coarsenlab"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const CLASSICAL: &str = r#"{
  "schema_version": 1,
  "kind": "classical",
  "classical": { "dt": 0.01, "t_end": 0.2, "output_stride": 0.02 }
}"#;

#[test]
fn classical_run_writes_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", CLASSICAL);
    let out = tmp.path().join("out");
    let status = coarsenlab()
        .args(["classical", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        status.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&status.stdout)
    );
    for f in ["config.json", "series.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(series.starts_with("t,L,Lambda,N,mass_residual\n"));
    assert!(!series.contains('\r'));
    assert!(fs::read_dir(out.join("snapshots")).unwrap().count() >= 2);
}

#[test]
fn zero_in_ladder_exits_two_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "s.json",
        r#"{"schema_version": 1, "kind": "sweep", "sweep": {"eps_ladder": [0.2, 0.0], "t_final": 1.0}}"#,
    );
    let o = coarsenlab()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep.eps_ladder"));
}

#[test]
fn kind_mismatch_and_bad_json_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", CLASSICAL);
    let o = coarsenlab()
        .args(["diffusive", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let bad = write(tmp.path(), "bad.json", "{");
    let o = coarsenlab()
        .args(["bd", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_check_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "kind": "classical",
            "classical": {"dt": 0.01, "t_end": 0.1, "output_stride": 0.05},
            "tolerances": {"classical_mass": -1.0}}"#,
    );
    let o = coarsenlab()
        .args(["classical", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL mass_residual"));
}

#[test]
fn solver_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    // the L floor is above any attainable value
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "kind": "classical",
            "classical": {"dt": 0.01, "t_end": 0.1, "output_stride": 0.05, "l_floor": 1e6}}"#,
    );
    let o = coarsenlab()
        .args(["classical", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn reruns_and_seed_override_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "m.json",
        r#"{"schema_version": 1, "kind": "mc-check", "seed": 3,
            "mc": {"eps": 0.25, "t_final": 0.1, "probes": [0.5, 1.0], "n_paths": 2000, "cells": 128}}"#,
    );
    let run = |name: &str, seed: Option<&str>| {
        let out = tmp.path().join(name);
        let mut c = coarsenlab();
        c.args(["mc-check", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out);
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        let o = c.output().unwrap();
        assert!(
            matches!(o.status.code(), Some(0 | 1)),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        fs::read(out.join("summary.json")).unwrap()
    };
    let a = run("a", None);
    assert_eq!(a, run("b", None));
    assert_ne!(a, run("c", Some("4")));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let config = coarsenlab::harness::ExperimentConfig::load(&p).unwrap();
        let stem = p.file_stem().unwrap().to_str().unwrap();
        assert_eq!(config.kind.as_str(), stem);
        n += 1;
    }
    assert_eq!(n, 6);
}
