use prism_core::corpus::source;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn prism(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism")).args(args).current_dir(dir).output().expect("binary runs")
}

fn put(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn put_corpus(dir: &TempDir, file: &str) -> String {
    put(dir, file, source(file).unwrap()).display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn clean_run_exits_zero_and_writes_stats() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "linked_list.pir");
    let stats = dir.path().join("s.json");
    let o = prism(&["run", &f, "--qpad", "16", "--stats", stats.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stats).unwrap()).unwrap();
    assert_eq!(s["dynamic_checks"], 0);
    assert_eq!(s["q"], 16);
    assert_eq!(s["exit"]["kind"], "ok");
    assert_eq!(
        s["static_checks_inserted"].as_u64().unwrap(),
        s["active"].as_u64().unwrap() + {
            let e = &s["elided_by"];
            ["qpad", "combine", "lower_bound", "hoist"].iter().map(|k| e[k].as_u64().unwrap()).sum::<u64>()
        }
    );
}

#[test]
fn bounds_violation_exits_two_with_a_json_report() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "partial_struct.pir");
    let o = prism(&["run", &f], dir.path());
    assert_eq!(code(&o), 2);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["reason"], "upper_bound");
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("violation:"));
    assert_eq!(code(&prism(&["run", &f, "--qpad", "48"], dir.path())), 0);
}

#[test]
fn negative_inputs_are_accepted() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "negative_index.pir");
    assert_eq!(code(&prism(&["run", &f, "-1"], dir.path())), 2);
    assert_eq!(code(&prism(&["run", &f, "5"], dir.path())), 0);
}

#[test]
fn escape_violation_exits_three() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "end_address_escape.pir");
    assert_eq!(code(&prism(&["run", &f], dir.path())), 3);
}

#[test]
fn malformed_program_exits_four() {
    let dir = TempDir::new().unwrap();
    let f = put(&dir, "bad.pir", "fn @main( -> int {\n");
    let o = prism(&["run", f.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn missing_file_exits_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&prism(&["run", "nope.pir"], dir.path())), 1);
}

#[test]
fn trace_prints_each_check() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "backward_traversal.pir");
    let o = prism(&["run", &f, "--trace", "--no-opt"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().filter(|l| l.starts_with('#')).count() > 0);
    assert!(out.lines().last().unwrap().starts_with("ok"));
}

#[test]
fn instrument_lists_sites() {
    let dir = TempDir::new().unwrap();
    let f = put_corpus(&dir, "cost_compare.pir");
    let o = prism(&["instrument", &f, "--sites", "--qpad", "8"], dir.path());
    assert_eq!(code(&o), 0);
    let sites: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    let checked = |s: &&serde_json::Value| {
        s["function"] == "cost_compare" && matches!(s["status"].as_str(), Some("active" | "lower_bound_dropped"))
    };
    assert_eq!(sites.iter().filter(checked).count(), 2);
    let o = prism(&["instrument", &f], dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("fn @"));
}

#[test]
fn corpus_passes_and_reports_json() {
    let dir = TempDir::new().unwrap();
    let o = prism(&["corpus", "--json", "c.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(r["mismatches"], 0);
    let o = prism(&["corpus", "partial_struct", "--mode", "pow2", "--qpad", "0", "--matrix"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok"));
    assert_eq!(code(&prism(&["corpus", "no_such_case"], dir.path())), 1);
}

#[test]
fn fuzz_campaign_is_clean() {
    let dir = TempDir::new().unwrap();
    let o = prism(&["fuzz", "--count", "300", "--dual", "--qpad", "8", "--json", "f.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(s["count"], 300);
    assert_eq!(s["failing_cases"], 0);
    assert!(!dir.path().join("fuzz-repro").exists());
}

#[test]
fn empty_fuzz_campaign_succeeds() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&prism(&["fuzz", "--count", "0"], dir.path())), 0);
}

#[test]
fn injected_bug_fails_the_campaign_and_writes_repros() {
    let dir = TempDir::new().unwrap();
    let o = prism(&["fuzz", "--count", "300", "--mutation", "skip-lower", "--out", "repro"], dir.path());
    assert_eq!(code(&o), 1);
    let repros: Vec<_> = std::fs::read_dir(dir.path().join("repro")).unwrap().collect();
    assert!(!repros.is_empty());
    let first = repros[0].as_ref().unwrap().path();
    // A reproducer is a runnable program on its own.
    let o = prism(&["run", first.to_str().unwrap(), "--mutation", "skip-lower"], dir.path());
    assert_ne!(code(&o), 4);
}
