//! Exit-code contract and flag handling.

use std::path::Path;
use std::process::Output;

fn run(args: &[&str], out: &Path) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_switchnorm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn gradcheck_passes_and_prints_five_group_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--shape", "2,3,4,4", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 5, "stdout: {stdout}");
    for group in ["input", "gamma", "beta", "lambda_mu", "lambda_var"] {
        assert!(stdout.contains(group), "missing {group} in {stdout}");
    }
}

#[test]
fn gradcheck_fails_with_impossible_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["gradcheck", "--shape", "2,3,4,4", "--seed", "7", "--threshold", "1e-30"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn equiv_passes_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["equiv", "--trials", "50", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("max_abs_diff="));
}

#[test]
fn unknown_flags_are_rejected_with_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["equiv", "--no-such-flag", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["not-a-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gradcheck", "--shape", "2,3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_the_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["train", "--steps", "10", "--samples", "64", "--batch", "8"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,acc,layer,stat,w_in,w_ln,w_bn"));
    // 10 steps x 2 layers x 2 stats
    assert_eq!(csv.lines().count(), 1 + 10 * 2 * 2);
}

#[test]
fn sweep_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sweep", "--sizes", "2,8", "--seeds", "3", "--steps", "15", "--samples", "64",
            "--net-width", "4", "--net-depth", "1",
        ],
        dir.path(),
    );
    // short runs may not show the direction; only the artifacts are checked here
    assert!(matches!(out.status.code(), Some(0) | Some(1)));
    let summary = std::fs::read_to_string(dir.path().join("sweep_summary.txt")).unwrap();
    assert!(summary.starts_with("w_bn_large="));
    assert!(summary.contains("direction="));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("size,seed,layer,stat,w_in,w_ln,w_bn"));
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
}

#[test]
fn default_sweep_replicates_the_direction() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep", "--sizes", "2,32", "--seeds", "5"], dir.path());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("direction=pass"), "stdout: {stdout}");
}

#[test]
fn remark1_reports_both_quantities() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["remark1", "--seed", "9", "--patches", "64"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("in_identity_error="));
    assert!(stdout.contains("ln_discrepancy="));
}

#[test]
fn weights_report_reads_saved_layers() {
    let dir = tempfile::tempdir().unwrap();
    let params_dir = dir.path().join("params");
    std::fs::create_dir_all(&params_dir).unwrap();
    let params = switchnorm::snlayer::SnParams::new(4);
    switchnorm::snlayer::save_params(&params, "sn0", &params_dir.join("layer0")).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(
        &["weights-report", "--params", &params_dir.display().to_string()],
        &out_dir,
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("weights.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,stat,w_in,w_ln,w_bn"));
    assert_eq!(csv.lines().count(), 3); // header + mu + var
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("avg_mu=[0.333333,0.333333,0.333333]"));
}
