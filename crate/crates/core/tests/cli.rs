use std::path::{Path, PathBuf};
use std::process::Command;

use monotone_stopping::cli::config::load_config;
use monotone_stopping::gmti_sim::{build_flyby_scenario, build_persistent_scenario};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_monostop"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

#[test]
fn bundled_configs_match_builders() {
    let flyby = load_config(&bundled("flyby.json")).unwrap();
    assert_eq!(flyby.scenario().unwrap(), &build_flyby_scenario());
    let persistent = load_config(&bundled("persistent.json")).unwrap();
    assert_eq!(persistent.scenario().unwrap(), &build_persistent_scenario());
    assert!(load_config(&bundled("dp.json")).unwrap().scenario.is_none());
}

#[test]
fn missing_seed_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, "{}").unwrap();
    let status = bin()
        .args(["dp-threshold", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin().arg("dp-threshold").arg("--out").arg(tmp.path().join("o")).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_field_and_bad_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "sede": 2}"#).unwrap();
    let out = bin().args(["dp-threshold", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let out = bin()
        .args(["optimize", "--family", "eigen-max", "--pd", "1.5", "--config"])
        .arg(bundled("flyby.json"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scenario_command_without_scenario_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["periodic-sweep", "--kmax", "3", "--seed", "4", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dp_threshold_outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str| {
        let out = tmp.path().join(dir);
        let status = bin()
            .args(["dp-threshold", "--config"])
            .arg(bundled("dp.json"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for name in ["threshold.csv", "config.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = std::fs::read_to_string(a.join("threshold.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["summary"]["monotonicity_violations"], 0);
}
