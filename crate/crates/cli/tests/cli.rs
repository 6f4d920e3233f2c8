use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stateful_ope::env::read_trajectories;
use stateful_ope::experiment::{replication_data, ExperimentConfig};

const BIN: &str = env!("CARGO_BIN_EXE_stateful-ope");

const SMALL_CONFIG: &str = r#"{
    "sample_sizes": [30, 60],
    "replications": 2,
    "truth_rollouts": 2000,
    "oos_rollouts": 400,
    "oracle_draws": 2000,
    "analysis_n": 200,
    "histogram_bins": 8,
    "estimation": { "grid_size": 21 }
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, SMALL_CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn assert_diagnostic(out: &Output) {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.trim().is_empty());
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

// ── simulate ────────────────────────────────────────────────────────────

#[test]
fn simulate_writes_n_times_horizon_rows_with_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    assert_ok(&run(&["simulate", "--n", "25", "--out", out.to_str().unwrap(), "--seed", "9"]));
    let path = out.join("trajectories.csv");
    let text = fs::read_to_string(&path).unwrap();
    let horizon = ExperimentConfig::default().env.horizon;
    assert_eq!(text.lines().count() - 1, 25 * horizon);
    assert_eq!(header(&path), "traj_id,t,s,x_0,x_1,a,y,r");
}

#[test]
fn simulated_file_reads_back_as_the_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    assert_ok(&run(&["simulate", "--n", "12", "--out", out.to_str().unwrap(), "--seed", "4", "--delta", "0.2"]));
    let read = read_trajectories(fs::File::open(out.join("trajectories.csv")).unwrap()).unwrap();
    let mut cfg = ExperimentConfig { master_seed: 4, ..ExperimentConfig::default() };
    cfg.env.mixture_delta = 0.2;
    let expected = replication_data(&cfg.env, 12, cfg.replication_seed(0)).unwrap();
    assert_eq!(read, expected);
}

#[test]
fn simulate_rejects_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    assert_diagnostic(&run(&["simulate", "--n", "3", "--out", out.to_str().unwrap()]));
}

// ── ope ─────────────────────────────────────────────────────────────────

#[test]
fn ope_is_deterministic_and_worker_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run(&["ope", "--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "1", "--modes", "dm,dr"]));
    assert_ok(&run(&["ope", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "4", "--modes", "dm,dr"]));
    let csv_a = fs::read(a.join("ope.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("ope.csv")).unwrap());
    assert_eq!(header(&a.join("ope.csv")), "mode,n,seed,estimate,oracle_value,rel_abs_error");
    // 2 modes x 2 sample sizes x 2 replications
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count() - 1, 8);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("ope_manifest.json")).unwrap()).unwrap();
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn ope_seed_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run(&["ope", "--config", &cfg, "--out", a.to_str().unwrap(), "--modes", "ipw", "--seed", "1"]));
    assert_ok(&run(&["ope", "--config", &cfg, "--out", b.to_str().unwrap(), "--modes", "ipw", "--seed", "2"]));
    assert_ne!(fs::read(a.join("ope.csv")).unwrap(), fs::read(b.join("ope.csv")).unwrap());
}

// ── learn ───────────────────────────────────────────────────────────────

#[test]
fn learn_writes_documented_columns_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run(&["learn", "--config", &cfg, "--out", a.to_str().unwrap(), "--modes", "dr", "--workers", "2"]));
    assert_ok(&run(&["learn", "--config", &cfg, "--out", b.to_str().unwrap(), "--modes", "dr", "--workers", "3"]));
    assert_eq!(header(&a.join("learn.csv")), "mode,n,seed,oos_value,oracle_gap");
    assert_eq!(fs::read(a.join("learn.csv")).unwrap(), fs::read(b.join("learn.csv")).unwrap());
    assert!(a.join("learn_manifest.json").exists());
}

// ── analyze ─────────────────────────────────────────────────────────────

#[test]
fn analyze_report_has_one_row_per_epoch_and_inventory_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("an");
    assert_ok(&run(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap(), "--delta", "0.2"]));
    let env = ExperimentConfig::default().env;
    let path = out.join("thresholds.csv");
    assert_eq!(header(&path), "t,s,theta_star,theta_hat,gap");
    let rows = fs::read_to_string(&path).unwrap().lines().count() - 1;
    assert_eq!(rows, env.horizon * env.initial_capacity as usize);
    let hist = fs::read_to_string(out.join("delta_hist.csv")).unwrap();
    assert_eq!(hist.lines().count() - 1, 8);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("analyze_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["env"]["mixture_delta"].as_f64(), Some(0.2));
}

// ── diagnostics ─────────────────────────────────────────────────────────

#[test]
fn missing_config_file_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["ope", "--config", missing.to_str().unwrap()]);
    assert_diagnostic(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn invalid_config_values_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{ "replications": 0 }"#).unwrap();
    assert_diagnostic(&run(&["learn", "--config", path.to_str().unwrap()]));
    fs::write(&path, r#"{ "sample_sizes": [0, 10] }"#).unwrap();
    assert_diagnostic(&run(&["learn", "--config", path.to_str().unwrap()]));
}

#[test]
fn unknown_mode_and_zero_workers_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_diagnostic(&run(&["ope", "--modes", "dm,xyz", "--out", out.to_str().unwrap()]));
    assert_diagnostic(&run(&["ope", "--workers", "0", "--out", out.to_str().unwrap()]));
    assert!(!out.exists());
}

#[test]
fn unknown_subcommand_fails() {
    assert_diagnostic(&run(&["frobnicate"]));
}
