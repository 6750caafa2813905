//! Independent verifier. Works from the trace and the checkpoint file only;
//! none of the protocol's own bookkeeping is consulted.

pub mod graph;
pub mod linearize;
pub mod mutate;
pub mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::artifact::CheckpointFile;
use crate::model::{fold_writes, CpNum, Key, ReplicaId, TxnId, Value, Versioned};

use graph::{base_ancestors, CutGraph};
pub use graph::{TraceError, TraceIndex};
use linearize::check_index;

/// Linearizations sampled per checkpoint when enumeration is too large.
pub const DEFAULT_LINEARIZATIONS: usize = 20;

/// Why a check failed, with the offending item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Counterexample {
    /// Happens-before the checkpoint but is absent from `cp_set`.
    MissingFromSet {
        txn: TxnId,
    },
    /// In `cp_set` but does not happen-before the checkpoint.
    NotBeforeCheckpoint {
        txn: TxnId,
    },
    /// In `cp_set` but never committed in the trace.
    UnknownTxn {
        txn: TxnId,
    },
    /// Outside `cp_set` but not ordered after the checkpoint.
    NotAfterCheckpoint {
        txn: TxnId,
    },
    /// `txn` is in `cp_set` but its causal predecessor `missing` is not.
    NotLeftClosed {
        txn: TxnId,
        missing: TxnId,
    },
    /// The checkpoint is both before and after some event.
    Cycle {
        seq: u64,
    },
    BadCut {
        replica: ReplicaId,
        detail: String,
    },
    IndexMismatch {
        sample: usize,
        position: usize,
        expected: usize,
    },
    StateMismatch {
        key: Key,
        expected: Option<(Value, u64, ReplicaId)>,
        found: Option<(Value, u64, ReplicaId)>,
    },
    ResolveError {
        detail: String,
    },
    KeyCount {
        expected: usize,
        found: usize,
    },
    UnsortedOrDuplicate {
        key: Key,
    },
    UnknownKey {
        key: Key,
    },
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Counterexample::*;
        match self {
            MissingFromSet { txn } => write!(
                f,
                "{txn} happens before the checkpoint but is missing from cp_set"
            ),
            NotBeforeCheckpoint { txn } => write!(
                f,
                "{txn} is in cp_set but does not happen before the checkpoint"
            ),
            UnknownTxn { txn } => write!(f, "{txn} is in cp_set but never committed"),
            NotAfterCheckpoint { txn } => {
                write!(f, "{txn} is outside cp_set but not after the checkpoint")
            }
            NotLeftClosed { txn, missing } => {
                write!(f, "{txn} is in cp_set but its predecessor {missing} is not")
            }
            Cycle { seq } => write!(f, "checkpoint is both before and after record {seq}"),
            BadCut { replica, detail } => write!(f, "cut at {replica}: {detail}"),
            IndexMismatch {
                sample,
                position,
                expected,
            } => write!(
                f,
                "linearization {sample} puts the checkpoint at {position}, expected {expected}"
            ),
            StateMismatch {
                key,
                expected,
                found,
            } => {
                write!(f, "{key}: expected {expected:?}, found {found:?}")
            }
            ResolveError { detail } => write!(f, "cannot fold cp_set: {detail}"),
            KeyCount { expected, found } => write!(f, "{found} state entries, expected {expected}"),
            UnsortedOrDuplicate { key } => write!(f, "{key} out of order or repeated"),
            UnknownKey { key } => write!(f, "{key} is not in the schema"),
        }
    }
}

/// Results of all per-checkpoint checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub cp_num: CpNum,
    pub dtcs_set_ok: bool,
    pub dtcs_order_ok: bool,
    pub cut_consistent: bool,
    pub index_fixed: bool,
    pub state_ok: bool,
    pub concise: bool,
    pub linearizations: usize,
    pub exhaustive: bool,
    pub counterexamples: Vec<Counterexample>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.dtcs_set_ok
            && self.dtcs_order_ok
            && self.cut_consistent
            && self.index_fixed
            && self.state_ok
            && self.concise
    }

    /// `name=bool` pairs in a fixed order, for reports.
    pub fn fields(&self) -> [(&'static str, bool); 6] {
        [
            ("dtcs_set_ok", self.dtcs_set_ok),
            ("dtcs_order_ok", self.dtcs_order_ok),
            ("cut_consistent", self.cut_consistent),
            ("index_fixed", self.index_fixed),
            ("state_ok", self.state_ok),
            ("concise", self.concise),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub linearizations: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            linearizations: DEFAULT_LINEARIZATIONS,
            seed: 0,
        }
    }
}

fn triple(v: &Versioned) -> (Value, u64, ReplicaId) {
    (v.value, v.ts.counter, v.ts.replica)
}

/// Check one checkpoint file against the trace it came from.
pub fn verify_checkpoint(
    ix: &TraceIndex,
    trace_seqs: &[u64],
    cp: &CheckpointFile,
    opts: VerifyOptions,
) -> Verdict {
    let mut v = Verdict {
        cp_num: cp.cp_num,
        dtcs_set_ok: true,
        dtcs_order_ok: true,
        cut_consistent: true,
        index_fixed: true,
        state_ok: true,
        concise: true,
        linearizations: 0,
        exhaustive: false,
        counterexamples: Vec::new(),
    };
    let ce = |v: &mut Verdict, c: Counterexample| v.counterexamples.push(c);
    check_concise(ix, cp, &mut v);

    // The cut must name exactly one in-range log position per replica.
    let mut cuts = Vec::with_capacity(ix.replicas as usize);
    for r in 0..ix.replicas {
        let id = ReplicaId(r);
        match cp.vpogc.get(&id) {
            Some(&pos) if pos as usize <= ix.log_nodes[r as usize].len() => cuts.push(pos),
            Some(&pos) => {
                ce(
                    &mut v,
                    Counterexample::BadCut {
                        replica: id,
                        detail: format!(
                            "index {pos} past the end of a {}-entry log",
                            ix.log_nodes[r as usize].len()
                        ),
                    },
                );
            }
            None => ce(
                &mut v,
                Counterexample::BadCut {
                    replica: id,
                    detail: "no cut position".into(),
                },
            ),
        }
    }
    if let Some((&id, _)) = cp.vpogc.range(ReplicaId(ix.replicas)..).next() {
        ce(
            &mut v,
            Counterexample::BadCut {
                replica: id,
                detail: "replica outside the group".into(),
            },
        );
    }
    let graph = (cuts.len() == ix.replicas as usize && cp.vpogc.len() == cuts.len())
        .then(|| CutGraph::new(ix, &cuts))
        .flatten();
    let Some(g) = graph else {
        v.cut_consistent = false;
        v.dtcs_set_ok = false;
        v.dtcs_order_ok = false;
        v.index_fixed = false;
        v.state_ok = false;
        return v;
    };

    let anc = g.reach(g.cp, false);
    let desc = g.reach(g.cp, true);
    let claimed: BTreeSet<TxnId> = cp.cp_set.iter().copied().collect();
    if claimed.len() != cp.cp_set.len() {
        v.concise = false;
    }
    let mut before = BTreeSet::new();
    for (&id, &(node, _)) in &ix.commits {
        let is_before = anc[node];
        let is_after = desc[node];
        if is_before {
            before.insert(id);
        }
        if is_before && !claimed.contains(&id) {
            v.dtcs_set_ok = false;
            ce(&mut v, Counterexample::MissingFromSet { txn: id });
        }
        if !is_before && claimed.contains(&id) {
            v.dtcs_set_ok = false;
            ce(&mut v, Counterexample::NotBeforeCheckpoint { txn: id });
        }
        let ordered = if claimed.contains(&id) {
            is_before && !is_after
        } else {
            is_after && !is_before
        };
        if !ordered {
            v.dtcs_order_ok = false;
            if !claimed.contains(&id) {
                ce(&mut v, Counterexample::NotAfterCheckpoint { txn: id });
            }
        }
    }
    for &id in claimed.iter().filter(|id| !ix.commits.contains_key(id)) {
        v.dtcs_set_ok = false;
        ce(&mut v, Counterexample::UnknownTxn { txn: id });
    }

    // Consistency: no event on both sides, and cp_set closed under causality.
    if let Some(node) = (0..ix.node_count()).find(|&u| anc[u] && desc[u]) {
        v.cut_consistent = false;
        ce(
            &mut v,
            Counterexample::Cycle {
                seq: trace_seqs[node],
            },
        );
    }
    let node_txn: BTreeMap<usize, TxnId> = ix
        .commits
        .iter()
        .map(|(&id, &(node, _))| (node, id))
        .collect();
    for &id in &claimed {
        let Some(&(node, _)) = ix.commits.get(&id) else {
            continue;
        };
        let closure = base_ancestors(ix, [node]);
        if let Some(missing) = node_txn
            .iter()
            .find(|(&u, t)| closure[u] && !claimed.contains(t))
            .map(|(_, t)| *t)
        {
            v.cut_consistent = false;
            ce(&mut v, Counterexample::NotLeftClosed { txn: id, missing });
            break;
        }
    }

    // Fixed index in linearizations.
    let commit_nodes: Vec<usize> = ix.commits.values().map(|(n, _)| *n).collect();
    let expected = cp.cp_set.len() + 1;
    let idx = check_index(&g, &commit_nodes, expected, opts.linearizations, opts.seed);
    v.linearizations = idx.checked;
    v.exhaustive = idx.exhaustive;
    if idx.cyclic {
        v.index_fixed = false;
        v.cut_consistent = false;
    }
    if let Some((sample, position)) = idx.mismatch {
        v.index_fixed = false;
        ce(
            &mut v,
            Counterexample::IndexMismatch {
                sample,
                position,
                expected,
            },
        );
    }

    // State: fold of the writes of the transactions that happen before.
    let writes = before
        .iter()
        .flat_map(|id| ix.commits[id].1.write_set.iter());
    match fold_writes(&ix.resolver, ix.schema.initial_state(), writes) {
        Err(e) => {
            v.state_ok = false;
            ce(
                &mut v,
                Counterexample::ResolveError {
                    detail: e.to_string(),
                },
            );
        }
        Ok(expected) => {
            let keys: BTreeSet<&Key> = expected.keys().collect();
            for e in &cp.state {
                if !keys.contains(&e.key) {
                    v.state_ok = false;
                    ce(&mut v, Counterexample::UnknownKey { key: e.key.clone() });
                }
            }
            for (key, want) in &expected {
                let mut found = cp.state.iter().filter(|e| &e.key == key).peekable();
                if found.peek().is_none() {
                    v.state_ok = false;
                    ce(
                        &mut v,
                        Counterexample::StateMismatch {
                            key: key.clone(),
                            expected: Some(triple(want)),
                            found: None,
                        },
                    );
                }
                for e in found {
                    if e.value != want.value || e.ts != want.ts {
                        v.state_ok = false;
                        ce(
                            &mut v,
                            Counterexample::StateMismatch {
                                key: key.clone(),
                                expected: Some(triple(want)),
                                found: Some((e.value, e.ts.counter, e.ts.replica)),
                            },
                        );
                    }
                }
            }
        }
    }
    v
}

/// Exactly one entry per schema key, in key order, nothing else.
fn check_concise(ix: &TraceIndex, cp: &CheckpointFile, v: &mut Verdict) {
    if cp.state.len() != ix.schema.keys.len() {
        v.concise = false;
        v.counterexamples.push(Counterexample::KeyCount {
            expected: ix.schema.keys.len(),
            found: cp.state.len(),
        });
    }
    let mut schema: Vec<&Key> = ix.schema.keys.iter().collect();
    schema.sort();
    for w in cp.state.windows(2) {
        if w[0].key >= w[1].key {
            v.concise = false;
            v.counterexamples.push(Counterexample::UnsortedOrDuplicate {
                key: w[1].key.clone(),
            });
        }
    }
    let present: BTreeSet<&Key> = cp.state.iter().map(|e| &e.key).collect();
    if present.len() == schema.len() && present.iter().copied().ne(schema.iter().copied()) {
        v.concise = false;
    }
}

/// Verify every checkpoint against one trace.
pub fn verify_all(
    trace: &[crate::trace::TraceRecord],
    checkpoints: &[CheckpointFile],
    opts: VerifyOptions,
) -> Result<Vec<Verdict>, TraceError> {
    let ix = TraceIndex::build(trace)?;
    let seqs: Vec<u64> = trace.iter().map(|r| r.seq).collect();
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(i, cp)| {
            let opts = VerifyOptions {
                seed: opts.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..opts
            };
            verify_checkpoint(&ix, &seqs, cp, opts)
        })
        .collect())
}
