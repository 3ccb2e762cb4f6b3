use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use peerselect::harness::{self, emit_report, emit_sweep_report, ReportFormat, RunSummary, ScenarioConfig, CSV_HEADER};
use serde_json::Value;

fn scenario(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    harness::load_config(path).unwrap().config
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                out.insert(format!("{prefix}{k}"));
                key_paths(x, &format!("{prefix}{k}."), out);
            }
        }
        Value::Array(items) => {
            for x in items {
                key_paths(x, &format!("{prefix}[]."), out);
            }
        }
        _ => {}
    }
}

#[test]
fn minimal_csv_matches_golden() {
    let summary = harness::run_scenario(&scenario("minimal.json")).unwrap();
    let csv = String::from_utf8(emit_report(&summary, ReportFormat::Csv).unwrap()).unwrap();
    let expected = std::fs::read_to_string(golden("minimal.csv")).unwrap();
    assert_eq!(csv, expected);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
    assert!(!csv.contains('\r'));
}

#[test]
fn json_key_set_matches_golden() {
    let summary = harness::run_scenario(&scenario("minimal.json")).unwrap();
    let value: Value = serde_json::from_slice(&emit_report(&summary, ReportFormat::Json).unwrap()).unwrap();
    let mut keys = BTreeSet::new();
    key_paths(&value, "", &mut keys);
    let expected: BTreeSet<String> = std::fs::read_to_string(golden("json_keys.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(keys, expected);
}

#[test]
fn json_round_trips() {
    for name in ["minimal.json", "mixed.json", "separation.json"] {
        let summary = harness::run_scenario(&scenario(name)).unwrap();
        let bytes = emit_report(&summary, ReportFormat::Json).unwrap();
        let back: RunSummary = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, summary, "{name}");
    }
}

#[test]
fn csv_row_count() {
    let cfg = scenario("mixed.json");
    let summary = harness::run_scenario(&cfg).unwrap();
    let csv = emit_report(&summary, ReportFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), summary.peers.len() + cfg.jobs.len() + 5);
    assert!(rows.iter().all(|r| r.len() == CSV_HEADER.len()));
    let kinds: Vec<_> = rows.iter().map(|r| r[0].to_string()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "job").count(), cfg.jobs.len());
    assert_eq!(kinds.iter().filter(|k| *k == "group").count(), 5);
}

#[test]
fn group_counts_cover_every_peer_row() {
    let summary = harness::run_scenario(&scenario("mixed.json")).unwrap();
    let total: u64 = summary.groups.iter().map(|g| g.peer_count as u64).sum();
    assert_eq!(total, summary.peers.len() as u64);
    let names: Vec<_> = summary.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(names, ["PG1", "PG2", "PG3", "PG4", "unclassified"]);
}

#[test]
fn sweep_matches_single_runs() {
    let cfg = scenario("mixed.json");
    let runs = harness::sweep(&cfg, 10, 4).unwrap();
    assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), [10, 11, 12, 13]);
    for run in &runs {
        assert_eq!(run, &harness::run_scenario_seeded(&cfg, run.seed).unwrap());
    }
}

#[test]
fn sweep_csv_has_seed_column() {
    let cfg = scenario("minimal.json");
    let runs = harness::sweep(&cfg, 0, 3).unwrap();
    let csv = emit_sweep_report(&runs, ReportFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(reader.headers().unwrap().iter().next_back(), Some("seed"));
    let seeds: BTreeSet<String> = reader
        .records()
        .map(|r| r.unwrap().iter().next_back().unwrap().to_string())
        .collect();
    assert_eq!(seeds, ["0", "1", "2"].map(String::from).into());

    let json: Value = serde_json::from_slice(&emit_sweep_report(&runs, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
}

#[test]
fn different_seeds_can_differ() {
    let cfg = scenario("separation.json");
    let a = harness::run_scenario_seeded(&cfg, 1).unwrap();
    let b = harness::run_scenario_seeded(&cfg, 2).unwrap();
    assert_ne!(a.peers, b.peers);
}
