mod common;

use std::fs;
use std::process::Command;

use common::{assert_invariants, run, scenario};
use rerrsim::harness::emit::{from_json, to_csv, to_json};
use rerrsim::harness::{run_scenario, CSV_COLUMNS};
use rerrsim::sim::TraceKind;

const CHAIN: &str = include_str!("../scenarios/chain3.conf");
const ESTIMATOR: &str = include_str!("../scenarios/estimator.conf");

#[test]
fn lossless_chain_delivers_everything_once() {
    let cfg = scenario(CHAIN);
    let o = run(&cfg);
    assert_invariants(&cfg, &o);
    let (_, report) = run_scenario(&cfg).unwrap();
    assert_eq!(report.delivery_ratio, 1.0);
    assert_eq!(report.per_trial[0].retransmissions, 0);
    assert_eq!(report.app_duplicates, 0.0);
    assert_eq!(report.rerr_success, 1.0);
    // Two hops of 2 ms and 3 ms, no queueing.
    assert_eq!(report.max_delay_us, 5_000.0);
    assert_eq!(report.mean_delay_us, 5_000.0);
}

#[test]
fn mid_link_failure_reports_reach_the_source() {
    let cfg = scenario(&format!("{ESTIMATOR}\nlink.1-2.fail = 100ms..inf\n"));
    let (_, report) = run_scenario(&cfg).unwrap();
    assert!(report.per_trial[0].rerr_generated >= 1);
    assert_eq!(report.rerr_success, 1.0);
    assert_eq!(report.rerr_stranded, 0.0);
    assert!(report.invariants.ok(), "{:?}", report.invariants);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let mut cfg = scenario(ESTIMATOR);
    cfg.run.trials = 3;
    let (t1, r1) = run_scenario(&cfg).unwrap();
    let (t2, r2) = run_scenario(&cfg).unwrap();
    assert_eq!(t1.to_tsv(), t2.to_tsv());
    assert_eq!(to_csv(&r1), to_csv(&r2));
    assert_eq!(to_json(&r1), to_json(&r2));
}

#[test]
fn csv_header_lists_the_documented_columns() {
    let (_, report) = run_scenario(&scenario(CHAIN)).unwrap();
    let csv = to_csv(&report);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, CSV_COLUMNS);
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), CSV_COLUMNS.len());
    assert_eq!(row[0], "chain3");
    assert!(lines.next().is_none());
}

#[test]
fn json_round_trips() {
    let (_, report) = run_scenario(&scenario(ESTIMATOR)).unwrap();
    let back = from_json(&to_json(&report)).unwrap();
    assert_eq!(back, report);
}

#[test]
fn report_is_the_mean_of_its_trials() {
    let mut cfg = scenario(&format!(
        "{ESTIMATOR}\nlink.1-2.fail = 100ms..inf\nlink.0-4.loss = 0.1\n"
    ));
    cfg.run.trials = 2;
    let (_, report) = run_scenario(&cfg).unwrap();
    let [a, b] = [&report.per_trial[0], &report.per_trial[1]];
    assert_eq!(a.seed + 1, b.seed);
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    assert!(close(
        report.delivery_ratio,
        (a.delivery_ratio + b.delivery_ratio) / 2.0
    ));
    assert!(close(report.mean_delay_us, (a.mean_delay_us + b.mean_delay_us) / 2.0));
    assert!(close(
        report.frames_corrupted,
        (a.frames_corrupted + b.frames_corrupted) as f64 / 2.0
    ));
    assert!(close(
        report.wire_duplicates,
        (a.wire_duplicates + b.wire_duplicates) as f64 / 2.0
    ));
}

#[test]
fn trace_round_trips_through_tsv_columns() {
    let cfg = scenario(CHAIN);
    let o = run(&cfg);
    let tsv = o.trace.to_tsv();
    for (line, rec) in tsv.lines().zip(o.trace.records()) {
        let cols: Vec<&str> = line.splitn(5, '\t').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], rec.time.as_micros().to_string());
        assert_eq!(cols[2], rec.kind.as_str());
    }
    assert!(o.trace.count(TraceKind::Deliver) > 0);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rerrsim"))
}

fn scenario_path(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn cli_run_writes_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["run", &scenario_path("chain3.conf"), "--trace", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("chain3.csv")).unwrap();
    assert!(csv.starts_with(&CSV_COLUMNS.join(",")));
    assert!(dir.path().join("chain3.trace.tsv").exists());
}

#[test]
fn cli_honours_output_dir_env_and_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args([
            "run",
            &scenario_path("chain3.conf"),
            "--format",
            "json",
            "--seed",
            "11",
            "--trials",
            "2",
        ])
        .env("RERRSIM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = from_json(&fs::read_to_string(dir.path().join("chain3.json")).unwrap()).unwrap();
    assert_eq!(report.seed, 11);
    assert_eq!(report.trials, 2);
}

#[test]
fn cli_validate_reports_errors_with_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "topology.nodes = 0..3\nlink.0-7.delay = 1ms\nflow.source = 0\n").unwrap();
    let out = cli().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let ok = cli()
        .args(["validate", &scenario_path("detour.conf")])
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn cli_oracle_prints_per_n_table() {
    let out = cli()
        .args(["oracle", &scenario_path("estimator.conf"), "--trials", "50"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("n\tempirical\testimate\tabs_diff"));
    assert!(text.contains("max_abs_diff="));
}
