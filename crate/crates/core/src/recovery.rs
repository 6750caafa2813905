//! Offline recovery from the latest checkpoint plus the commit-logs.
//!
//! Every replica restarts from the checkpoint state and replays the local
//! transactions that each replica logged after its cut. The replay order
//! differs per replica; the resolver makes the result the same anyway.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{
    fold_writes, Checkpoint, CommitLogEntry, Key, ModelError, ReplicaId, ResolverKind, Schema,
    Transaction, TxnId, Versioned,
};
use crate::simnet::{CompletedCheckpoint, TimedEntry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("no commit-log for {0}")]
    MissingLog(ReplicaId),
    #[error("checkpoint has no cut position for {0}")]
    MissingCut(ReplicaId),
    #[error("cut at {replica} is index {index} but the log has {len} entries")]
    CutPastEnd {
        replica: ReplicaId,
        index: u64,
        len: usize,
    },
    #[error("entry {index} at {replica} is not the CpLog that opens checkpoint {cp}")]
    CutNotAtMarker {
        replica: ReplicaId,
        index: u64,
        cp: u64,
    },
    #[error("{txn} precedes the cut at its origin but is missing from the checkpoint")]
    LostTxn { txn: TxnId },
    #[error("{txn} is both in the checkpoint and after the cut")]
    ReplayedTwice { txn: TxnId },
    #[error("checkpoint state: {0}")]
    State(#[from] ModelError),
    #[error("checkpoint covers keys {found:?}, schema has {expected:?}")]
    KeyMismatch { expected: Vec<Key>, found: Vec<Key> },
}

/// What to replay on top of a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub base: Checkpoint,
    /// Local transactions after each replica's cut, in log order.
    pub suffix: Vec<Transaction>,
}

impl RecoveryPlan {
    pub fn replayed(&self) -> Vec<TxnId> {
        self.suffix.iter().map(|t| t.id).collect()
    }
}

pub fn plan(
    cp: &Checkpoint,
    logs: &BTreeMap<ReplicaId, Vec<TimedEntry>>,
    replicas: u16,
    schema: &Schema,
) -> Result<RecoveryPlan, RecoveryError> {
    let found: Vec<Key> = cp.state.keys().cloned().collect();
    let mut expected = schema.keys.clone();
    expected.sort();
    if found != expected {
        return Err(RecoveryError::KeyMismatch { expected, found });
    }
    let mut suffix = Vec::new();
    for r in (0..replicas).map(ReplicaId) {
        let log = logs.get(&r).ok_or(RecoveryError::MissingLog(r))?;
        let v = *cp.vpogc.get(&r).ok_or(RecoveryError::MissingCut(r))?;
        if v as usize > log.len() {
            return Err(RecoveryError::CutPastEnd {
                replica: r,
                index: v,
                len: log.len(),
            });
        }
        if cp.cp_num.0 != 0 {
            match log.get(v as usize).map(|e| &e.entry) {
                Some(CommitLogEntry::CpLog(n)) if *n == cp.cp_num => {}
                _ => {
                    return Err(RecoveryError::CutNotAtMarker {
                        replica: r,
                        index: v,
                        cp: cp.cp_num.0,
                    })
                }
            }
        }
        for (i, e) in log.iter().enumerate() {
            let Some(t) = e.entry.local_txn() else {
                continue;
            };
            let covered = cp.cp_set.contains(&t.id);
            if (i as u64) < v {
                if !covered {
                    return Err(RecoveryError::LostTxn { txn: t.id });
                }
            } else if covered {
                return Err(RecoveryError::ReplayedTwice { txn: t.id });
            } else {
                suffix.push(t.clone());
            }
        }
    }
    Ok(RecoveryPlan {
        base: cp.clone(),
        suffix,
    })
}

/// Recovered state at each replica. Replica `r` replays the suffix rotated by `r`.
pub fn execute(
    plan: &RecoveryPlan,
    replicas: u16,
    resolver: ResolverKind,
) -> Result<Vec<BTreeMap<Key, Versioned>>, RecoveryError> {
    let k = plan.suffix.len();
    (0..replicas as usize)
        .map(|r| {
            let order = (0..k).map(|i| &plan.suffix[(i + r) % k]);
            let writes = order.flat_map(|t| t.write_set.iter());
            Ok(fold_writes(&resolver, plan.base.state.clone(), writes)?)
        })
        .collect()
}

/// Logs as they stood at time `t` (entries appended after `t` are lost).
pub fn truncate_logs(logs: &[Vec<TimedEntry>], t: u64) -> BTreeMap<ReplicaId, Vec<TimedEntry>> {
    logs.iter()
        .enumerate()
        .map(|(r, log)| {
            let kept = log.iter().take_while(|e| e.time <= t).cloned().collect();
            (ReplicaId(r as u16), kept)
        })
        .collect()
}

/// The newest checkpoint completed by time `t`, or the genesis checkpoint.
pub fn latest_checkpoint(
    checkpoints: &[CompletedCheckpoint],
    t: u64,
    schema: &Schema,
    replicas: u16,
) -> Checkpoint {
    checkpoints
        .iter()
        .filter(|c| c.completed_at <= t)
        .max_by_key(|c| c.checkpoint.cp_num)
        .map(|c| c.checkpoint.clone())
        .unwrap_or_else(|| Checkpoint::genesis(schema, replicas))
}

/// Local transactions present in `logs`.
pub fn committed_by(logs: &BTreeMap<ReplicaId, Vec<TimedEntry>>) -> BTreeSet<TxnId> {
    logs.values()
        .flatten()
        .filter_map(|e| e.entry.local_txn().map(|t| t.id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CpNum, Timestamp, Write};

    fn txn(r: u16, seq: u32, key: &str, value: i64, counter: u64) -> Transaction {
        Transaction {
            id: TxnId::new(ReplicaId(r), seq),
            read_set: vec![],
            write_set: vec![Write {
                key: Key::new(key),
                value,
                ts: Timestamp::new(counter, ReplicaId(r)),
            }],
            start_color: None,
            end_color: None,
        }
    }

    fn timed(entries: Vec<CommitLogEntry>) -> Vec<TimedEntry> {
        entries
            .into_iter()
            .enumerate()
            .map(|(i, entry)| TimedEntry {
                index: i as u64,
                time: i as u64,
                entry,
            })
            .collect()
    }

    fn schema() -> Schema {
        Schema {
            keys: vec![Key::new("a"), Key::new("b")],
            initial_value: 0,
        }
    }

    fn setup() -> (Checkpoint, BTreeMap<ReplicaId, Vec<TimedEntry>>) {
        let t0 = txn(0, 0, "a", 5, 1);
        let t1 = txn(1, 0, "b", 7, 1);
        let t2 = txn(1, 1, "a", 9, 2);
        let mut state = schema().initial_state();
        state.insert(Key::new("a"), t0.write_set[0].versioned());
        state.insert(Key::new("b"), t1.write_set[0].versioned());
        let cp = Checkpoint {
            cp_num: CpNum(1),
            state,
            cp_set: [t0.id, t1.id].into_iter().collect(),
            vpogc: [(ReplicaId(0), 1), (ReplicaId(1), 1)].into_iter().collect(),
        };
        let logs = BTreeMap::from([
            (
                ReplicaId(0),
                timed(vec![
                    CommitLogEntry::LocalTxn(t0),
                    CommitLogEntry::CpLog(CpNum(1)),
                ]),
            ),
            (
                ReplicaId(1),
                timed(vec![
                    CommitLogEntry::LocalTxn(t1),
                    CommitLogEntry::CpLog(CpNum(1)),
                    CommitLogEntry::LocalTxn(t2),
                ]),
            ),
        ]);
        (cp, logs)
    }

    #[test]
    fn replays_suffix_on_every_replica() {
        let (cp, logs) = setup();
        let p = plan(&cp, &logs, 2, &schema()).unwrap();
        assert_eq!(p.replayed(), vec![TxnId::new(ReplicaId(1), 1)]);
        let states = execute(&p, 2, ResolverKind::Lww).unwrap();
        assert_eq!(states[0], states[1]);
        assert_eq!(states[0][&Key::new("a")].value, 9);
        assert_eq!(states[0][&Key::new("b")].value, 7);
    }

    #[test]
    fn missing_log_is_unrecoverable() {
        let (cp, mut logs) = setup();
        logs.remove(&ReplicaId(1));
        assert_eq!(
            plan(&cp, &logs, 2, &schema()),
            Err(RecoveryError::MissingLog(ReplicaId(1)))
        );
    }

    #[test]
    fn cut_must_sit_on_its_marker() {
        let (mut cp, logs) = setup();
        cp.vpogc.insert(ReplicaId(1), 2);
        assert!(matches!(
            plan(&cp, &logs, 2, &schema()),
            Err(RecoveryError::CutNotAtMarker { .. })
        ));
    }

    #[test]
    fn transaction_before_cut_but_not_in_checkpoint_is_lost() {
        let (mut cp, logs) = setup();
        cp.cp_set.remove(&TxnId::new(ReplicaId(1), 0));
        assert_eq!(
            plan(&cp, &logs, 2, &schema()),
            Err(RecoveryError::LostTxn {
                txn: TxnId::new(ReplicaId(1), 0)
            })
        );
    }
}
