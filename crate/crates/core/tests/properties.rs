//! Run-level properties over randomly drawn configurations.

use std::collections::BTreeSet;

use kvsnap_core::fuzz::{random_config, run_and_check, FuzzParams};
use kvsnap_core::simnet::{run, Policy};
use kvsnap_core::trace::{replication_subtrace, to_jsonl, Event, TraceRecord};
use kvsnap_core::ReplicaId;
use proptest::prelude::*;

fn small() -> FuzzParams {
    FuzzParams {
        replicas: 2..=4,
        txns: 10..=60,
        rounds: 2,
        ..FuzzParams::default()
    }
}

fn kind(e: &Event) -> String {
    serde_json::to_value(e).unwrap()["kind"]
        .as_str()
        .unwrap()
        .to_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_seed_same_trace(seed in any::<u64>()) {
        let cfg = random_config(&small(), seed);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        prop_assert_eq!(to_jsonl(&a.trace), to_jsonl(&b.trace));
    }

    #[test]
    fn duplicate_delivery_is_harmless(seed in any::<u64>()) {
        let p = FuzzParams { dup_prob: 0.3, ..small() };
        let report = run_and_check(&p, seed);
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn fifo_and_reorder_both_pass(seed in any::<u64>(), fifo in any::<bool>()) {
        let policy = if fifo { Policy::Fifo } else { Policy::Reorder };
        let p = FuzzParams { policy, ..small() };
        let report = run_and_check(&p, seed);
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn control_delay_leaves_replication_alone(seed in any::<u64>(), scale in 2u64..20) {
        let cfg = random_config(&small(), seed);
        let mut slow = cfg.clone();
        slow.channels.control_scale = scale;
        let a = run(&cfg).unwrap();
        let b = run(&slow).unwrap();
        prop_assert_eq!(replication_subtrace(&a.trace), replication_subtrace(&b.trace));
    }
}

#[test]
fn duplicates_are_marked_and_not_logged() {
    let p = FuzzParams {
        dup_prob: 0.5,
        ..small()
    };
    let out = run(&random_config(&p, 11)).unwrap();
    let dups: Vec<&TraceRecord> = out
        .trace
        .iter()
        .filter(|r| {
            matches!(
                r.event,
                Event::Receive {
                    duplicate: true,
                    ..
                }
            )
        })
        .collect();
    assert!(!dups.is_empty());
    assert!(dups.iter().all(|r| r.event.appended_log_index().is_none()));
}

#[test]
fn every_event_kind_round_trips_through_jsonl() {
    let mut seen = BTreeSet::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let p = FuzzParams {
        replicas: 3..=3,
        txns: 150..=150,
        rounds: 3,
        ..FuzzParams::default()
    };
    for seed in 0..20 {
        let out = run(&random_config(&p, seed)).unwrap();
        for r in out.trace {
            if seen.insert(kind(&r.event)) {
                trace.push(r);
            }
        }
    }
    trace.push(TraceRecord {
        seq: u64::MAX,
        time: 0,
        replica: ReplicaId(0),
        event: Event::Warning {
            message: "x".into(),
        },
    });
    seen.insert("warning".into());
    let text = to_jsonl(&trace);
    let back: Vec<TraceRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, trace);
    let expected: BTreeSet<String> = [
        "run_start",
        "txn_begin",
        "lock_wait",
        "lock_acquired",
        "commit",
        "send",
        "receive",
        "color_change",
        "cp_log_append",
        "vpolc",
        "phase",
        "counters",
        "checkpoint_patch",
        "polarity_swap",
        "checkpoint_done",
        "warning",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(seen, expected);
}
