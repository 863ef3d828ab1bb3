//! End-to-end tests of the `attract` binary: exit codes, file outputs, and
//! config plumbing.

use std::path::Path;
use std::process::{Command, Output};

fn attract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attract"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_run_args<'a>(dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "run",
        "--set",
        "online_iterations=1",
        "--set",
        "updates_per_iteration=2",
        "--set",
        "batch_size=4",
        "--set",
        "eval_episodes=2",
        "--set",
        "eval_every=1",
        "--set",
        "env_horizon=6",
        "--set",
    ];
    args.push(Box::leak(format!("output_dir={dir}").into_boxed_str()));
    args.extend_from_slice(extra);
    args
}

#[test]
fn run_writes_metrics_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let dir_str = dir.path().to_str().unwrap();
    let out = attract(&tiny_run_args(dir_str, &[]));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let metrics = dir.path().join("metrics.csv");
    assert!(metrics.exists(), "stdout: {}", stdout(&out));
    assert!(stdout(&out).contains("metrics written to"));
    let text = std::fs::read_to_string(metrics).unwrap();
    assert!(text.contains("evaluation/return_mean_gm"));
}

#[test]
fn run_accepts_a_config_file_and_cli_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &cfg_path,
        format!(
            "seed = 9\nonline_iterations = 1\nupdates_per_iteration = 2\nbatch_size = 4\n\
             eval_episodes = 2\neval_every = 1\nenv_horizon = 6\noutput_dir = {:?}\n",
            out_dir.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = attract(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "seed=10",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    // the seed column must reflect the command-line override, not the file
    assert!(
        text.lines().any(|l| l.starts_with("0,10,")),
        "metrics did not use the overridden seed:\n{text}"
    );
}

#[test]
fn zero_iterations_run_emits_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let dir_str = dir.path().to_str().unwrap();
    let out = attract(&tiny_run_args(dir_str, &["--set", "online_iterations=0"]));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let data_rows: Vec<&str> =
        text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step,")).collect();
    assert_eq!(data_rows.len(), 1, "expected exactly the pre-training row:\n{text}");
    assert!(data_rows[0].starts_with("0,"), "row must be at step 0: {}", data_rows[0]);
}

#[test]
fn bad_config_values_exit_one() {
    let out = attract(&["run", "--set", "phi=1.5"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let out = attract(&["run", "--set", "nonsense_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = attract(&["run", "--set", "malformed"]);
    assert_eq!(out.status.code(), Some(1));
    let out = attract(&["run", "--config", "/nonexistent/definitely-missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_arguments_exit_one_and_help_exits_zero() {
    let out = attract(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).to_lowercase().contains("usage"), "stderr: {}", stderr(&out));
    let out = attract(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).to_lowercase().contains("usage"));
}

#[test]
fn check_runs_all_suites_and_exits_zero() {
    let out = attract(&["check"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for name in [
        "attraction_closed_form",
        "attraction_bound",
        "attraction_steady_state",
        "softmax_drift",
        "routing_equivalence",
        "gradient_check",
    ] {
        assert!(text.contains(&format!("[PASS] {name}")), "missing {name}:\n{text}");
    }
    assert!(text.contains("all 6 suites passed"));
}

#[test]
fn codebook_reports_shape_and_uses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cache_str = cache.to_str().unwrap();
    let out = attract(&["codebook", "--dim", "3", "--codes", "27", "--cache-dir", cache_str]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("27 codes on a 3^3 grid (27 cells)"));
    assert!(stdout(&out).contains("Stored"), "first build should store: {}", stdout(&out));
    let out = attract(&["codebook", "--dim", "3", "--codes", "27", "--cache-dir", cache_str]);
    assert!(stdout(&out).contains("Hit"), "second build should hit: {}", stdout(&out));
    // invalid geometry is a usage error
    let out = attract(&["codebook", "--dim", "0", "--codes", "27"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trace_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let dir_str = dir.path().to_str().unwrap();
    let mut args = vec!["trace", "--set"];
    let owned = format!("output_dir={dir_str}");
    args.push(&owned);
    args.extend_from_slice(&["--set", "env_horizon=6", "--episode-seed", "4"]);
    let out = attract(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(Path::new(dir_str).join("trace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,a0,a1,a2,reward_raw,reward_normalized,code,attraction_after"
    );
    let body: Vec<&str> = lines.collect();
    assert!(!body.is_empty() && body.len() <= 6, "unexpected row count: {}", body.len());
    assert!(stdout(&out).contains("trace written to"));
}
