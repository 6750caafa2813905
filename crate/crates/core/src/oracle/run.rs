//! Whole-run properties read off the trace: message overhead, the shape of
//! replicate messages, absence of blocking, counter alternation.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::Value as Json;

use super::graph::TraceIndex;
use crate::model::{
    fold_writes, ChannelKind, CpNum, Key, MessageBody, ModelError, TxnId, Versioned,
};
use crate::protocol::CheckpointerPhase;
use crate::trace::{Event, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhaseCommits {
    pub cp: CpNum,
    pub phase: CheckpointerPhase,
    /// Local commits per replica while the initiator was in this phase.
    pub commits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunChecks {
    pub replicas: u16,
    pub rounds_completed: usize,
    /// Control messages sent, by round.
    pub control_per_round: BTreeMap<CpNum, usize>,
    pub control_ok: bool,
    pub replicate_sends: usize,
    /// Replicate messages carry the transaction plus one integer.
    pub piggyback_ok: bool,
    /// Commits happened exactly `exec_ticks` after lock acquisition and lock
    /// waits were only ever on other client transactions.
    pub async_ok: bool,
    pub phases: Vec<PhaseCommits>,
    pub counter_alternation_ok: bool,
    pub polarity_swap_writes: u64,
    pub problems: Vec<String>,
}

impl RunChecks {
    pub fn passed(&self) -> bool {
        self.control_ok
            && self.piggyback_ok
            && self.async_ok
            && self.counter_alternation_ok
            && self.polarity_swap_writes == 0
    }

    /// True if every replica committed at least once in every active phase of every round.
    pub fn commits_in_every_phase(&self) -> bool {
        let active: Vec<&PhaseCommits> =
            self.phases.iter().filter(|p| p.phase.is_active()).collect();
        !active.is_empty() && active.iter().all(|p| p.commits.iter().all(|&c| c > 0))
    }
}

fn object_keys(v: &Json) -> Option<BTreeSet<&str>> {
    v.as_object()
        .map(|o| o.keys().map(String::as_str).collect())
}

/// Checks the replicate body as it appears on the wire.
fn piggyback_problem(body: &MessageBody, from_initiator: bool) -> Option<String> {
    let v = serde_json::to_value(body).expect("bodies serialize");
    let inner = v.get("replicate")?;
    if object_keys(inner) != Some(BTreeSet::from(["txn", "cp"])) {
        return Some(format!(
            "replicate body has fields {:?}",
            object_keys(inner)
        ));
    }
    if object_keys(&inner["txn"]) != Some(BTreeSet::from(["id", "read_set", "write_set"])) {
        return Some(format!(
            "wire transaction has fields {:?}",
            object_keys(&inner["txn"])
        ));
    }
    let Some(cp) = inner["cp"].as_u64() else {
        return Some("cp is not an integer".into());
    };
    if from_initiator && cp % 2 == 0 {
        return Some(format!("initiator stamped even cpNum {cp}"));
    }
    None
}

pub fn check_run(trace: &[TraceRecord], ix: &TraceIndex) -> RunChecks {
    let n = ix.replicas;
    let mut out = RunChecks {
        replicas: n,
        rounds_completed: 0,
        control_per_round: BTreeMap::new(),
        control_ok: true,
        replicate_sends: 0,
        piggyback_ok: true,
        async_ok: true,
        phases: Vec::new(),
        counter_alternation_ok: true,
        polarity_swap_writes: 0,
        problems: Vec::new(),
    };
    let mut begins: BTreeMap<TxnId, u64> = BTreeMap::new();
    let mut acquired: BTreeMap<TxnId, u64> = BTreeMap::new();
    let mut active: BTreeSet<TxnId> = BTreeSet::new();
    let mut last_slot: Option<(CpNum, usize)> = None;
    for rec in trace {
        match &rec.event {
            Event::Send {
                channel: ChannelKind::Control,
                body,
                ..
            } => {
                let cp = match body {
                    MessageBody::CutForCp { cp } | MessageBody::CutForCpReply { cp, .. } => *cp,
                    MessageBody::Replicate { cp, .. } => *cp,
                };
                *out.control_per_round.entry(cp).or_default() += 1;
            }
            Event::Send { body, .. } => {
                out.replicate_sends += 1;
                if let Some(p) = piggyback_problem(body, rec.replica.index() == 0) {
                    out.piggyback_ok = false;
                    out.problems.push(format!("record {}: {p}", rec.seq));
                }
            }
            Event::TxnBegin {
                txn, exec_ticks, ..
            } => {
                begins.insert(*txn, *exec_ticks);
                active.insert(*txn);
            }
            Event::LockWait { txn, blocked_by } => {
                for b in blocked_by {
                    if b.replica != txn.replica || !active.contains(b) {
                        out.async_ok = false;
                        out.problems.push(format!(
                            "record {}: {txn} waits on {b}, which is not an active transaction",
                            rec.seq
                        ));
                    }
                }
            }
            Event::LockAcquired { txn } => {
                acquired.insert(*txn, rec.time);
            }
            Event::Commit { txn, .. } => {
                let id = txn.id;
                active.remove(&id);
                match (begins.get(&id), acquired.get(&id)) {
                    (Some(&exec), Some(&at)) if rec.time == at + exec => {}
                    (exec, at) => {
                        out.async_ok = false;
                        out.problems.push(format!(
                            "record {}: {id} committed at t={} (acquired {at:?}, exec {exec:?})",
                            rec.seq, rec.time
                        ));
                    }
                }
                if let Some(p) = out.phases.last_mut() {
                    p.commits[rec.replica.index()] += 1;
                }
            }
            Event::Phase { cp, phase } if rec.replica.index() == 0 => {
                out.phases.push(PhaseCommits {
                    cp: *cp,
                    phase: *phase,
                    commits: vec![0; n as usize],
                });
            }
            Event::Counters { cp, slot, .. } => {
                let want = if cp.0 % 4 == 1 { 0 } else { 1 };
                if *slot != want {
                    out.counter_alternation_ok = false;
                    out.problems
                        .push(format!("round {cp} used counter slot {slot}"));
                }
                if let Some((prev_cp, prev_slot)) = last_slot {
                    if prev_cp != *cp && prev_slot == *slot {
                        out.counter_alternation_ok = false;
                        out.problems.push(format!(
                            "rounds {prev_cp} and {cp} share counter slot {slot}"
                        ));
                    }
                }
                last_slot = Some((*cp, *slot));
            }
            Event::PolaritySwap {
                status_writes_before,
                status_writes_after,
                ..
            } => {
                out.polarity_swap_writes += status_writes_after - status_writes_before;
            }
            Event::CheckpointDone { .. } => out.rounds_completed += 1,
            _ => {}
        }
    }
    let expected = 2 * (n as usize - 1);
    for (cp, &count) in &out.control_per_round {
        if count != expected {
            out.control_ok = false;
            out.problems.push(format!(
                "round {cp}: {count} control messages, expected {expected}"
            ));
        }
    }
    if out.control_per_round.len() != out.rounds_completed {
        out.control_ok = false;
        out.problems.push(format!(
            "{} rounds sent control messages but {} completed",
            out.control_per_round.len(),
            out.rounds_completed
        ));
    }
    out
}

/// State every replica must reach once all commits are everywhere.
pub fn expected_final_state(ix: &TraceIndex) -> Result<BTreeMap<Key, Versioned>, ModelError> {
    fold_writes(
        &ix.resolver,
        ix.schema.initial_state(),
        ix.commits.values().flat_map(|(_, t)| t.write_set.iter()),
    )
}
