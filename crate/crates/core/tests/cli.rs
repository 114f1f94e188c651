use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slope-lgcp")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn data_flags(sim: &str) -> Vec<String> {
    ["units", "edges", "covariates", "counts"].iter().flat_map(|k| [format!("--{k}"), format!("{sim}/{k}.csv")]).collect()
}

fn with_data<'a>(head: &[&'a str], data: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(data.iter().map(String::as_str)).collect()
}

#[test]
fn fit_with_29_covariates_reports_30_fixed_effects() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--lattice", "8x6", "--periods", "2", "--n-covariates", "29", "--coefficients", &vec!["0.1"; 29].join(","), "--seed", "3", "--out", "sim"]);
    let data = data_flags("sim");
    ok(p, &with_data(&["fit", "--model", "mod1", "--out", "fit"], &data));
    let fe = records(&p.join("fit/fixed_effects.csv"));
    assert_eq!(fe.len(), 30);
    assert!(p.join("fit/manifest.json").exists());
}

#[test]
fn missing_covariates_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--lattice", "4x3", "--periods", "2", "--seed", "1", "--out", "sim"]);
    let out = run(
        p,
        &["fit", "--units", "sim/units.csv", "--edges", "sim/edges.csv", "--covariates", "sim/nope.csv", "--counts", "sim/counts.csv", "--out", "fit"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn unknown_flag_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["fit", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn classify_mod5_against_baseline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--lattice", "6x5", "--periods", "3", "--model", "mod5", "--seed", "4", "--out", "sim"]);
    let data = data_flags("sim");
    ok(p, &with_data(&["fit", "--model", "mod5", "--out", "adv"], &data));
    ok(p, &with_data(&["fit", "--model", "mod1", "--out", "base"], &data));
    ok(p, &["classify", "--fit", "adv", "--baseline", "base", "--out", "cls"]);
    let classes = records(&p.join("cls/classes.csv"));
    assert_eq!(classes.len(), 90);
    let allowed = ["CLEARLY_STABLE", "UNCERTAIN_1", "UNCERTAIN_2", "CLEARLY_UNSTABLE"];
    assert!(classes.iter().all(|r| allowed.contains(&&r[4])));
    assert_eq!(records(&p.join("cls/ratios.csv")).len(), 90);
    assert!(p.join("adv/trends.csv").exists());

    ok(p, &["report", "--fit", "adv", "--units", "sim/units.csv", "--out", "rep"]);
    let table = records(&p.join("rep/table3.csv"));
    let su: f64 = table.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    let area: f64 = table.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
    assert!((su - 100.0).abs() <= 0.01 && (area - 100.0).abs() <= 0.01, "{su} {area}");
}

#[test]
fn spatial_cv_writes_a_partition_of_units() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--lattice", "6x5", "--periods", "2", "--seed", "5", "--out", "sim"]);
    let data = data_flags("sim");
    ok(p, &with_data(&["cv", "--scheme", "spatial", "--k", "10", "--out", "cv"], &data));
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for f in 0..10 {
        let rows = records(&p.join(format!("cv/folds/fold_{f:02}.csv")));
        assert!(!rows.is_empty());
        total += rows.len();
        seen.extend(rows.iter().map(|r| r[0].to_string()));
    }
    let units: BTreeSet<String> = records(&p.join("sim/units.csv")).iter().map(|r| r[0].to_string()).collect();
    assert_eq!(total, 30);
    assert_eq!(seen, units);
}

#[test]
fn temporal_cv_reports_one_row_per_period() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--lattice", "5x4", "--periods", "6", "--model", "mod2", "--seed", "6", "--out", "sim"]);
    let data = data_flags("sim");
    ok(p, &with_data(&["cv", "--scheme", "temporal", "--model", "mod2", "--out", "cv"], &data));
    let rows = records(&p.join("cv/metrics.csv"));
    assert_eq!(rows.iter().filter(|r| &r[2] != "pooled").count(), 6);
    assert_eq!(rows.iter().filter(|r| &r[2] == "pooled").count(), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.conf"), "# defaults\nlattice = 4x3\nperiods = 2\nseed = 9\nout = from_config\n").unwrap();
    ok(p, &["--config", "run.conf", "simulate", "--out", "from_flag"]);
    assert!(p.join("from_flag/counts.csv").exists());
    assert!(!p.join("from_config").exists());
    assert_eq!(records(&p.join("from_flag/units.csv")).len(), 12);
}
