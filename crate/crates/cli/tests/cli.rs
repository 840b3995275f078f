use std::process::{Command, Output};

use clap::Parser;
use siri_cli::experiments::{
    DEDUP_HEADER, DIFF_HEADER, LATENCY_HEADER, PARAMS_HEADER, STORAGE_HEADER, THROUGHPUT_HEADER,
};
use siri_cli::{run, Cli, Table};

fn bench(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bench"));
    cmd.args(args).env_remove("SIRI_SEED");
    if let Some(s) = seed {
        cmd.env("SIRI_SEED", s);
    }
    cmd.output().unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = bench(args, None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn table(args: &[&str]) -> Table {
    let mut argv = vec!["bench"];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv).unwrap();
    run(cli.command, &cli.config).unwrap()
}

const SMALL: [&str; 6] = ["--n", "500", "--ops", "200", "--repetitions", "1"];

#[test]
fn headers_are_stable() {
    let cases: [(&str, &[&str]); 6] = [
        ("throughput", &THROUGHPUT_HEADER),
        ("latency", &LATENCY_HEADER),
        ("storage", &STORAGE_HEADER),
        ("dedup", &DEDUP_HEADER),
        ("params", &PARAMS_HEADER),
        ("diffbench", &DIFF_HEADER),
    ];
    for (sub, header) in cases {
        let mut args = vec![sub, "--structure", "mbt", "--versions", "2", "--delta", "1"];
        args.extend_from_slice(&SMALL);
        let csv = stdout(&args);
        assert_eq!(csv.lines().next().unwrap(), header.join(","), "{sub}");
        assert!(csv.lines().count() > 1, "{sub} produced no rows");
    }
    assert_eq!(THROUGHPUT_HEADER.join(","), "structure,n,theta,write_ratio,ops_per_sec,mean_visits");
}

#[test]
fn empty_latency_workload_has_header_only() {
    let csv = stdout(&["latency", "--ops", "0"]);
    assert_eq!(csv, format!("{}\n", LATENCY_HEADER.join(",")));
}

#[test]
fn zero_versions_report_zero_storage() {
    let t = table(&["storage", "--versions", "0", "--n", "100"]);
    assert_eq!(t.rows.len(), 4);
    assert!(t.rows.iter().all(|r| r[1..] == ["0", "0", "0"]));
}

#[test]
fn storage_rows_grow_with_versions() {
    let t = table(&["storage", "--structure", "mbt", "--n", "2000", "--versions", "4", "--batch", "20"]);
    let nodes: Vec<u64> = t.rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(nodes[0], 0);
    let growth: Vec<u64> = nodes[1..].windows(2).map(|w| w[1] - w[0]).collect();
    assert!(growth.iter().all(|g| *g > 0 && *g <= 20 * 6), "{growth:?}");
}

#[test]
fn conflicting_parameters_fail_with_diagnostics() {
    for args in [
        &["dedup", "--structure", "mpt", "--mbt-buckets", "64"][..],
        &["dedup", "--structure", "mbt", "--ablate-si"],
        &["params", "--structure", "pos", "--pos-node-bytes", "1024"],
        &["throughput", "--structure", "btree"],
        &["storage", "--key-min", "9", "--key-max", "3"],
    ] {
        let out = bench(args, None);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(out.stdout.is_empty());
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("bench: "), "{args:?}");
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let args = ["storage", "--structure", "pos", "--n", "300", "--versions", "2"];
    let one = bench(&args, Some("7")).stdout;
    let again = bench(&args, Some("7")).stdout;
    let flag = stdout(&["storage", "--structure", "pos", "--n", "300", "--versions", "2", "--seed", "7"]);
    let other = bench(&args, Some("8")).stdout;
    assert_eq!(one, again);
    assert_eq!(String::from_utf8(one.clone()).unwrap(), flag);
    assert_ne!(one, other);
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let out = bench(&["params", "--structure", "mbt", "--n", "400", "--versions", "2", "--out", path.to_str().unwrap()], None);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let csv = std::fs::read_to_string(path).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn mbt_path_length_is_a_single_spike() {
    let t = table(&["latency", "--structure", "mbt,mpt", "--n", "3000", "--ops", "1000"]);
    let spikes = |s: &str| t.rows.iter().filter(|r| r[0] == s && r[1] == "read" && r[2] == "path_length").count();
    assert_eq!(spikes("mbt"), 1);
    assert!(spikes("mpt") > 1);
}

#[test]
fn diff_visits_stay_on_the_changed_path() {
    let t = table(&["diffbench", "--n", "3000", "--delta", "1", "--repetitions", "1"]);
    let visits = |s: &str| -> usize { t.rows.iter().find(|r| r[0] == s).unwrap()[3].parse().unwrap() };
    for s in ["mpt", "mbt", "pos"] {
        assert!(visits(s) < visits("mvmb"), "{s} {} vs mvmb {}", visits(s), visits("mvmb"));
    }
    assert!(visits("pos") <= 2 * 4 + 2);
}

#[test]
fn dedup_grows_with_overlap_and_shrinks_with_batch() {
    let t = table(&["dedup", "--structure", "pos", "--n", "3000", "--overlap", "0,1", "--batch", "100,1000"]);
    let eta = |o: &str, b: &str| -> f64 {
        t.rows.iter().find(|r| r[1].starts_with(o) && r[2] == b).unwrap()[3].parse().unwrap()
    };
    assert!(eta("1", "100") >= eta("0", "100"));
    assert!(eta("1", "1000") >= eta("0", "1000"));
    assert!(eta("0", "100") > eta("0", "1000"));
}

#[test]
fn reader_threads_leave_visit_counts_unchanged() {
    let a = table(&["throughput", "--n", "2000", "--ops", "400", "--batch", "50", "--repetitions", "1"]);
    let b = table(&["throughput", "--n", "2000", "--ops", "400", "--batch", "50", "--repetitions", "1", "--readers", "4"]);
    assert_eq!(a.deterministic_rows(), b.deterministic_rows());
}

#[test]
fn alpha_rows_carry_predictions() {
    let t = table(&["dedup", "--n", "2000", "--alpha", "0.2"]);
    for r in &t.rows {
        match r[0].as_str() {
            "mvmb" => assert_eq!(r[4], ""),
            "mbt" | "pos" => assert_eq!(r[4], "0.400000"),
            _ => assert!(!r[4].is_empty()),
        }
    }
}
