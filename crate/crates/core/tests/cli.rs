use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e/pipeline.toml")
}

fn gmner(args: &[&str], work: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmner"))
        .args(args)
        .arg("-c")
        .arg(config())
        .arg("--work-dir")
        .arg(work)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_reports_and_respects_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gmner(&["run-all", "--json", "--gate", "0.99"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["f1"], 1.0);
    assert!(tmp.path().join("report.json").exists());

    let off = tmp.path().join("off");
    let out = gmner(&["run-all", "--set", "stages.stage2=false", "--gate", "0.95"], &off);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("below the gate"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("w/o stage2"));
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["synthesize", "train", "infer", "refine", "select", "ground"] {
        let out = gmner(&[stage], tmp.path());
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let out = gmner(&["eval"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
}

#[test]
fn missing_upstream_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gmner(&["infer"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("run `train` first"), "{}", stderr(&out));
}

#[test]
fn foreign_artifacts_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["synthesize", "train"] {
        assert!(gmner(&[stage], tmp.path()).status.success());
    }
    let out = gmner(&["infer", "--seed", "99"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("produced under config"), "{}", stderr(&out));
}

#[test]
fn bad_overrides_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gmner(&["train", "--set", "router.beta"], tmp.path());
    assert!(!out.status.success());
    let out = gmner(&["train", "--mode", "sideways"], tmp.path());
    assert!(!out.status.success());
}
