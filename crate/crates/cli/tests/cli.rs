//! End-to-end runs of the `kvsnap` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value as Json;
use tempfile::TempDir;

fn kvsnap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvsnap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

struct Run {
    _dir: TempDir,
    trace: PathBuf,
    cps: PathBuf,
}

fn run_scenario(name: &str, seed: &str) -> Run {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let cps = dir.path().join("cps");
    let o = kvsnap(&[
        "run",
        "--config",
        &scenario(name),
        "--seed",
        seed,
        "--trace",
        s(&trace),
        "--checkpoint-dir",
        s(&cps),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    Run {
        _dir: dir,
        trace,
        cps,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn verify(r: &Run) -> Output {
    kvsnap(&["verify", "--trace", s(&r.trace), "--checkpoints", s(&r.cps)])
}

#[test]
fn run_writes_artifacts_that_verify() {
    let r = run_scenario("red_arrives_late.json", "1");
    for f in [
        "cp-0001.json",
        "final.json",
        "logs/meta.json",
        "logs/log-r0.jsonl",
        "logs/log-r2.jsonl",
    ] {
        assert!(r.cps.join(f).exists(), "{f}");
    }
    let o = verify(&r);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("dtcs_set_ok=true dtcs_order_ok=true cut_consistent=true"));
    assert!(
        out.contains("control round=1 messages=4 expected=4"),
        "{out}"
    );
    assert!(out.trim_end().ends_with("verdict pass"));
}

#[test]
fn same_seed_same_trace_bytes() {
    let a = run_scenario("five_rounds.json", "9");
    let b = run_scenario("five_rounds.json", "9");
    assert_eq!(fs::read(&a.trace).unwrap(), fs::read(&b.trace).unwrap());
    let c = run_scenario("five_rounds.json", "10");
    assert_ne!(fs::read(&a.trace).unwrap(), fs::read(&c.trace).unwrap());
}

#[test]
fn tampered_checkpoint_names_the_missing_transaction() {
    let r = run_scenario("remote_txn_completes_round.json", "1");
    let path = r.cps.join("cp-0001.json");
    let mut cp: Json = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let set = cp["cp_set"].as_array_mut().unwrap();
    let gone = set.remove(set.len() - 1);
    assert_eq!(gone, serde_json::json!({"replica": 2, "seq": 0}));
    fs::write(&path, serde_json::to_string_pretty(&cp).unwrap()).unwrap();
    let o = verify(&r);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("dtcs_set_ok=false"), "{out}");
    assert!(out.contains("r2.t0"), "{out}");
    assert!(out.contains("missing_from_set"), "{out}");
    assert!(out.trim_end().ends_with("verdict fail"));
}

#[test]
fn missing_trace_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = kvsnap(&[
        "verify",
        "--trace",
        s(&dir.path().join("nope.jsonl")),
        "--checkpoints",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_trace_exits_4() {
    let r = run_scenario("remote_txn_completes_round.json", "1");
    let text = fs::read_to_string(&r.trace).unwrap();
    // two records out of order: sequence numbers go backwards
    let lines: Vec<&str> = text.lines().collect();
    let mut gappy = lines.clone();
    gappy.swap(3, 4);
    fs::write(&r.trace, gappy.join("\n")).unwrap();
    assert_eq!(verify(&r).status.code(), Some(4));
    fs::write(&r.trace, format!("{}\n{{not json\n", lines[0])).unwrap();
    assert_eq!(verify(&r).status.code(), Some(4));
}

#[test]
fn bad_config_and_bad_usage_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"replicas": 3, "no_such_field": 1}"#).unwrap();
    let o = kvsnap(&[
        "run",
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--trace",
        s(&dir.path().join("t")),
        "--checkpoint-dir",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        kvsnap(&["fuzz", "--replicas", "5..2"]).status.code(),
        Some(2)
    );
    assert_eq!(kvsnap(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn recover_without_suffix_returns_the_checkpoint() {
    let r = run_scenario("remote_txn_completes_round.json", "1");
    let cp = r.cps.join("cp-0001.json");
    let once = r.cps.join("once.json");
    let twice = r.cps.join("twice.json");
    for out in [&once, &twice] {
        let o = kvsnap(&[
            "recover",
            "--checkpoint",
            s(&cp),
            "--logs",
            s(&r.cps.join("logs")),
            "--out",
            s(out),
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains("replayed=0 converged=true"));
    }
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
    let state: Json = serde_json::from_str(&fs::read_to_string(&once).unwrap()).unwrap();
    let cp: Json = serde_json::from_str(&fs::read_to_string(&cp).unwrap()).unwrap();
    assert_eq!(state, cp["state"]);
}

#[test]
fn recover_matches_final_state_at_quiescence() {
    let r = run_scenario("five_rounds.json", "2");
    let out = r.cps.join("rec.json");
    let o = kvsnap(&[
        "recover",
        "--checkpoint",
        s(&r.cps.join("cp-0001.json")),
        "--logs",
        s(&r.cps.join("logs")),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let got: Json = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let want: Json =
        serde_json::from_str(&fs::read_to_string(r.cps.join("final.json")).unwrap()).unwrap();
    // one state per replica
    let want = want.as_array().unwrap();
    assert!(want.len() == 4 && want.iter().all(|w| *w == got));
}

#[test]
fn recover_without_a_log_exits_6() {
    let r = run_scenario("remote_txn_completes_round.json", "1");
    fs::remove_file(r.cps.join("logs/log-r1.jsonl")).unwrap();
    let o = kvsnap(&[
        "recover",
        "--checkpoint",
        s(&r.cps.join("cp-0001.json")),
        "--logs",
        s(&r.cps.join("logs")),
    ]);
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn small_fuzz_campaign_passes() {
    let o = kvsnap(&[
        "fuzz",
        "--runs",
        "20",
        "--replicas",
        "2..4",
        "--seed-base",
        "7",
        "--channel",
        "fifo",
        "--rounds",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn event_budget_exhaustion_is_a_liveness_failure() {
    let dir = TempDir::new().unwrap();
    let mut cfg: Json =
        serde_json::from_str(&fs::read_to_string(scenario("five_rounds.json")).unwrap()).unwrap();
    cfg["max_events"] = 50.into();
    let path = dir.path().join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = kvsnap(&[
        "run",
        "--config",
        s(&path),
        "--seed",
        "1",
        "--trace",
        s(&dir.path().join("t")),
        "--checkpoint-dir",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
