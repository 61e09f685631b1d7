//! Black-box tests of the binary: verbs, flags, and the documented exit
//! codes (0 success, 2 parse, 3 validation, 4 runtime).

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ftc-consensus"))
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn run_writes_trace_and_reports_summary() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("out.csv");
    let output = bin()
        .args(["run"])
        .arg(scenario_path("paper_baseline_faultfree.toml"))
        .args(["--t-end", "2.0", "--output"])
        .arg(&trace_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let text = stdout(&output);
    assert!(text.contains("no events"));
    assert!(text.contains("agent 1: healthy"));
    assert!(text.contains("agent 5: healthy"));
    let written = std::fs::read_to_string(&trace_path).unwrap();
    let lines: Vec<&str> = written.lines().collect();
    assert_eq!(lines.len(), 2002, "header plus 2001 rows");
    assert!(lines[0].starts_with("t,xr_1,xr_2,x_1_1"));
}

#[test]
fn run_detects_fault_and_disable_flag_keeps_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("out.csv");
    let output = bin()
        .args(["run"])
        .arg(scenario_path("paper_process_fault.toml"))
        .args(["--t-end", "8.0", "--disable-ftc", "--output"])
        .arg(&trace_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let text = stdout(&output);
    assert!(text.contains("fault injected"));
    assert!(text.contains("fault detected"));
    assert!(text.contains("detected at t=5.010"));
}

#[test]
fn unreadable_scenario_is_a_runtime_failure() {
    let output = bin()
        .args(["run", "/nonexistent/path.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4), "{output:?}");
}

#[test]
fn malformed_scenario_is_a_parse_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "this is not a scenario").unwrap();
    let output = bin().args(["run"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn out_of_range_value_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad_gain.toml");
    let text = std::fs::read_to_string(scenario_path("paper_baseline_faultfree.toml"))
        .unwrap()
        .replace("detection_observer = 2.0", "detection_observer = -2.0");
    std::fs::write(&path, text).unwrap();
    let output = bin().args(["run"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(3), "{output:?}");
    let err = String::from_utf8_lossy(&output.stderr).into_owned();
    assert!(
        err.contains("gains.detection_observer"),
        "error names the key: {err}"
    );
}

#[test]
fn disconnected_network_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.toml");
    // Dropping the (3,5) and (4,5) edges strands agents 3 and 4.
    let text = std::fs::read_to_string(scenario_path("paper_baseline_faultfree.toml"))
        .unwrap()
        .replace("  [3, 5, 1.0],\n", "")
        .replace("  [4, 5, 1.0],\n", "");
    std::fs::write(&path, text).unwrap();
    let output = bin().args(["verify-graph"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}

#[test]
fn verify_graph_prints_spectrum_and_verdict() {
    let output = bin()
        .args(["verify-graph"])
        .arg(scenario_path("paper_baseline_faultfree.toml"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let text = stdout(&output);
    assert!(text.contains("directed Laplacian"));
    assert!(text.contains("eigenvalues (ascending):"));
    assert!(text.contains("verdict: PASS"));
    // Largest eigenvalue of the benchmark network, pinned.
    assert!(text.contains("+5.177126322731e1"));
}

#[test]
fn summarize_reads_back_a_written_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("out.csv");
    let run = bin()
        .args(["run"])
        .arg(scenario_path("paper_baseline_faultfree.toml"))
        .args(["--t-end", "1.0", "--output"])
        .arg(&trace_path)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{run:?}");
    let output = bin().args(["summarize"]).arg(&trace_path).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let text = stdout(&output);
    assert!(text.contains("statistics window"));
    assert!(text.contains("agent 5: healthy"));
}

#[test]
fn summarize_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.csv");
    std::fs::write(&path, "a,b\n1,notanumber\n").unwrap();
    let output = bin().args(["summarize"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}
