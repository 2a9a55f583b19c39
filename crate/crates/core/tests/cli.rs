use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn matchdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchdiff"))
        .args(args)
        .current_dir(dir)
        .env_remove("MATCHDIFF_OUT")
        .output()
        .unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

const SMALL: [&str; 4] = ["--synth.n", "32", "--synth.trials", "3"];

fn synth(dir: &Path, out: &str, extra: &[&str]) {
    let args: Vec<&str> = ["synth", "--out", out]
        .iter()
        .chain(&SMALL)
        .chain(extra)
        .copied()
        .collect();
    assert!(matchdiff(dir, &args).status.success());
}

#[test]
fn synth_writes_instances_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let out = matchdiff(
        dir.path(),
        &["synth", "--out", "a", "--synth.n", "20", "--synth.trials", "3"],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(read(dir.path().join("a/manifest.tsv")), stdout);
    for k in 0..3 {
        let inst = dir.path().join(format!("a/instance_{k:04}"));
        for f in [
            "source.xyz",
            "target.xyz",
            "source_features.bin",
            "target_features.bin",
            "gt.json",
        ] {
            assert!(inst.join(f).is_file(), "{f} missing");
        }
    }
    synth(dir.path(), "b", &["--synth.n", "20"]);
    for k in 0..3 {
        for f in ["source.xyz", "target_features.bin", "gt.json"] {
            let rel = format!("instance_{k:04}/{f}");
            assert_eq!(
                std::fs::read(dir.path().join("a").join(&rel)).unwrap(),
                std::fs::read(dir.path().join("b").join(&rel)).unwrap()
            );
        }
    }
}

#[test]
fn zero_trials_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = matchdiff(dir.path(), &["synth", "--out", "s", "--synth.trials", "0"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert_eq!(read(dir.path().join("s/manifest.tsv")), "");
}

#[test]
fn empty_register_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matchdiff(dir.path(), &["register", "--out", "r"]).status.success());
    assert_eq!(
        read(dir.path().join("r/register.csv")),
        format!("{}\n", matchdiff::cli::REGISTER_CSV_HEADER)
    );
}

#[test]
fn perfect_features_give_unit_inlier_ratio() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &["--synth.rho", "1"]);
    assert!(
        matchdiff(dir.path(), &["register", "s", "--out", "r", "--synth.rho", "1"])
            .status
            .success()
    );
    let summary = json(dir.path().join("r/summary.json"));
    assert_eq!(summary["instances"], 3);
    assert_eq!(summary["report"]["ir"], 1.0);
    assert_eq!(summary["report"]["rr"], 1.0);
}

#[test]
fn step_ablation_csvs_align_row_for_row() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &[]);
    assert!(
        matchdiff(dir.path(), &["register", "s", "--out", "one", "--sampler.steps", "1"])
            .status
            .success()
    );
    assert!(
        matchdiff(dir.path(), &["register", "s", "--out", "twenty", "--sampler.steps=20"])
            .status
            .success()
    );
    let key = |p: &str| -> Vec<String> {
        read(dir.path().join(p))
            .lines()
            .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(key("one/register.csv"), key("twenty/register.csv"));
    assert_eq!(key("one/register.csv").len(), 4);
}

#[test]
fn malformed_instance_is_skipped_with_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &[]);
    std::fs::write(dir.path().join("s/instance_0001/target.xyz"), "1 2\n").unwrap();
    let out = matchdiff(dir.path(), &["register", "s", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instance_0001"));
    let csv = read(dir.path().join("r/register.csv"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(json(dir.path().join("r/summary.json"))["failed"][0], "instance_0001");
}

#[test]
fn deformable_register_reports_flow_metrics() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &["--task", "deformable"]);
    assert!(
        matchdiff(dir.path(), &["register", "s", "--out", "r", "--task", "deformable"])
            .status
            .success()
    );
    let report = &json(dir.path().join("r/summary.json"))["report"];
    for key in ["nfmr", "epe", "acc_s", "acc_r", "outlier"] {
        assert!(report[key].is_number(), "{key} missing");
    }
    assert!(report.get("rr").is_none());
    let record = json(dir.path().join("r/instances/instance_0000.json"));
    assert!(record["metrics"]["flow"]["epe"].is_number());
}

#[test]
fn metrics_command_reproduces_register_summary() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &[]);
    assert!(matchdiff(dir.path(), &["register", "s", "--out", "r"]).status.success());
    assert!(matchdiff(dir.path(), &["metrics", "r", "--out", "m"]).status.success());
    assert_eq!(
        json(dir.path().join("m/metrics.json")),
        json(dir.path().join("r/summary.json"))["report"]
    );
}

#[test]
fn trace_dump_has_one_file_per_state() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", &["--synth.trials", "1"]);
    let args = [
        "register",
        "s",
        "--out",
        "r",
        "--sampler.steps",
        "4",
        "--sampler.keep_trace",
        "true",
    ];
    assert!(matchdiff(dir.path(), &args).status.success());
    let trace = dir.path().join("r/instances/instance_0000_trace");
    assert_eq!(std::fs::read_dir(trace).unwrap().count(), 5);
}

#[test]
fn verify_default_run_holds_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        matchdiff(dir.path(), &["verify", "--out", "v", "--verify.theorem2_trials", "5"])
            .status
            .success()
    );
    let report = json(dir.path().join("v/verify.json"));
    let records = report["theorem1"].as_array().unwrap();
    assert_eq!(records.len(), 200);
    assert!(records.iter().all(|r| r["holds"] == true));
    assert_eq!(report["summary"]["theorem2_exact"], 5);
}

#[test]
fn verify_identical_clouds_has_zero_lhs() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "verify",
        "--out",
        "v",
        "--verify.trials",
        "1",
        "--verify.identical",
        "true",
        "--verify.theorem2_trials",
        "0",
    ];
    assert!(matchdiff(dir.path(), &args).status.success());
    assert!(
        json(dir.path().join("v/verify.json"))["theorem1"][0]["lhs"]
            .as_f64()
            .unwrap()
            < 1e-20
    );
}

#[test]
fn verify_refuses_oversized_instances() {
    let dir = tempfile::tempdir().unwrap();
    let out = matchdiff(dir.path(), &["verify", "--out", "v", "--verify.n", "9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("supports 1..=6"));
}

#[test]
fn bench_cells_are_reproducible_and_match_register() {
    let dir = tempfile::tempdir().unwrap();
    let grid = [
        "--bench.steps",
        "[1,20]",
        "--bench.rho",
        "[0.1,0.3]",
        "--bench.overlap",
        "[1.0]",
    ];
    let bench = |out: &str| {
        let args: Vec<&str> = ["bench", "--out", out]
            .iter()
            .chain(&SMALL)
            .chain(&grid)
            .copied()
            .collect();
        assert!(matchdiff(dir.path(), &args).status.success());
        read(dir.path().join(out).join("bench.csv"))
    };
    let first = bench("b1");
    assert_eq!(first.lines().count(), 5);
    assert_eq!(first, bench("b2"));
    assert_eq!(read(dir.path().join("b1/bench_timing.csv")).lines().count(), 5);

    // Cell (steps 20, rho 0.3, overlap 1) against synth + register.
    synth(dir.path(), "s", &["--synth.rho", "0.3", "--synth.overlap", "1.0"]);
    assert!(
        matchdiff(dir.path(), &["register", "s", "--out", "r", "--sampler.steps", "20"])
            .status
            .success()
    );
    let report = &json(dir.path().join("r/summary.json"))["report"];
    let row: Vec<&str> = first
        .lines()
        .find(|l| l.starts_with("20,0.3,1,"))
        .unwrap()
        .split(',')
        .collect();
    let num = |s: &str| s.parse::<f64>().unwrap();
    assert_eq!(num(row[4]), report["ir"].as_f64().unwrap());
    assert_eq!(num(row[5]), report["nfmr"].as_f64().unwrap());
    assert_eq!(num(row[6]), report["rr"].as_f64().unwrap());
    assert_eq!(num(row[7]), report["fmr"].as_f64().unwrap());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        matchdiff(dir.path(), &["synth", "--sampler.bogus", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        matchdiff(dir.path(), &["synth", "--synth.overlap", "0"]).status.code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.json"), "[1, 2]").unwrap();
    assert_eq!(
        matchdiff(dir.path(), &["synth", "--config", "bad.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn config_file_flags_and_env_compose() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"synth.trials": 5, "synth.n": 10, "output": "from_file"}"#,
    )
    .unwrap();
    let out = matchdiff(dir.path(), &["synth", "--config", "cfg.json", "--synth.trials", "2"]);
    assert!(out.status.success());
    assert_eq!(read(dir.path().join("from_file/manifest.tsv")).lines().count(), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_matchdiff"))
        .args(["synth", "--synth.trials", "1", "--synth.n", "10"])
        .current_dir(dir.path())
        .env("MATCHDIFF_OUT", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/instance_0000/gt.json").is_file());
}
