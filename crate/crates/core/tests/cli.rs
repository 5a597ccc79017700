//! End-to-end checks of the `tabrl` binary: config loading, overrides,
//! error reporting, and byte-identical reruns.

use std::fs;
use std::path::Path;
use std::process::Command;

fn tabrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tabrl"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn plan_experiment_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "plan.cfg",
        "kind = plan\nseeds = 1,2\ninstance.s = 5\ninstance.a = 2\n",
    );
    for out in ["a", "b"] {
        let status = tabrl()
            .args(["plan", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let left = fs::read(dir.path().join("a/results.csv")).unwrap();
    let right = fs::read(dir.path().join("b/results.csv")).unwrap();
    assert_eq!(left, right);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("instance.gamma = 0.9"));
}

#[test]
fn seeds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "plan.cfg",
        "kind = plan\nseeds = 1\ninstance.s = 4\ninstance.a = 2\n",
    );
    let out = dir.path().join("out");
    let status = tabrl()
        .args(["plan", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--seeds", "7,8,9"])
        .status()
        .unwrap();
    assert!(status.success());
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4);
    assert!(results.contains(",7,") || results.contains(",7\n"));
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.cfg", "kind = plan\ngama = 0.9\n");
    let output = tabrl()
        .args(["plan", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("gama"), "stderr: {stderr}");
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "plan.cfg", "kind = plan\n");
    let output = tabrl()
        .args(["online", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("plan") && stderr.contains("online"),
        "stderr: {stderr}"
    );
}

#[test]
fn sweep_produces_trace_files_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "online.cfg",
        "kind = online\nseeds = 5\nsweep.param = algo.episodes\nsweep.values = 10,20\n\
         instance.s = 3\ninstance.a = 2\ninstance.h = 3\n",
    );
    let out = dir.path().join("out");
    let status = tabrl()
        .args(["online", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("trace_s5_v10.csv").exists());
    assert!(out.join("trace_s5_v20.csv").exists());
    let body = fs::read_to_string(out.join("trace_s5_v20.csv")).unwrap();
    assert_eq!(body.lines().count(), 21);
}

#[test]
fn verify_subcommand_reports_selected_criteria() {
    // Run only the two fastest criteria to keep this end-to-end check quick.
    let output = tabrl().args(["verify", "--only", "3,11"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(output.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("[ 3] PASS"), "stdout: {stdout}");
    assert!(stdout.contains("[11] PASS"), "stdout: {stdout}");
}
