//! Deliberate corruptions of a correct checkpoint. The verifier must reject
//! every one of them.

use std::collections::BTreeSet;

use rand::seq::{IndexedMutRandom, IndexedRandom};
use rand::Rng;
use serde::Serialize;

use super::graph::TraceIndex;
use crate::artifact::{CheckpointFile, StateEntry};
use crate::model::{Key, ReplicaId, Timestamp, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    RemoveTxn,
    AddTxn,
    PerturbValue,
    PerturbTimestamp,
    DropKey,
    ExtraKey,
    DuplicateKey,
    /// Move one replica's cut past its next local commit.
    ShiftCutLater,
    /// Move one replica's cut before its previous local commit.
    ShiftCutEarlier,
}

impl Mutation {
    pub const ALL: [Mutation; 9] = [
        Mutation::RemoveTxn,
        Mutation::AddTxn,
        Mutation::PerturbValue,
        Mutation::PerturbTimestamp,
        Mutation::DropKey,
        Mutation::ExtraKey,
        Mutation::DuplicateKey,
        Mutation::ShiftCutLater,
        Mutation::ShiftCutEarlier,
    ];
}

/// Local-commit log positions at one replica.
fn local_positions(ix: &TraceIndex, r: usize) -> Vec<u64> {
    let commit_nodes: BTreeSet<usize> = ix.commits.values().map(|(n, _)| *n).collect();
    ix.log_nodes[r]
        .iter()
        .enumerate()
        .filter(|(_, n)| commit_nodes.contains(n))
        .map(|(i, _)| i as u64)
        .collect()
}

/// Apply `m` to a copy of `cp`. `None` if the mutation has no target here
/// (for example no local commit after any cut).
pub fn mutate(
    ix: &TraceIndex,
    cp: &CheckpointFile,
    m: Mutation,
    rng: &mut impl Rng,
) -> Option<CheckpointFile> {
    let mut out = cp.clone();
    match m {
        Mutation::RemoveTxn => {
            if out.cp_set.is_empty() {
                return None;
            }
            let i = rng.random_range(0..out.cp_set.len());
            out.cp_set.remove(i);
        }
        Mutation::AddTxn => {
            let present: BTreeSet<TxnId> = cp.cp_set.iter().copied().collect();
            let outside: Vec<TxnId> = ix
                .commits
                .keys()
                .filter(|t| !present.contains(t))
                .copied()
                .collect();
            let t = outside
                .choose(rng)
                .copied()
                .unwrap_or(TxnId::new(ReplicaId(0), u32::MAX));
            out.cp_set.push(t);
            out.cp_set.sort();
        }
        Mutation::PerturbValue => {
            let e = out.state.choose_mut(rng)?;
            e.value = e.value.wrapping_add(rng.random_range(1..=9));
        }
        Mutation::PerturbTimestamp => {
            let e = out.state.choose_mut(rng)?;
            e.ts = Timestamp::new(e.ts.counter + rng.random_range(1..=9), e.ts.replica);
        }
        Mutation::DropKey => {
            if out.state.is_empty() {
                return None;
            }
            let i = rng.random_range(0..out.state.len());
            out.state.remove(i);
        }
        Mutation::ExtraKey => {
            out.state.push(StateEntry {
                key: Key::new("zz-not-a-key"),
                value: 0,
                ts: Timestamp::GENESIS,
            });
        }
        Mutation::DuplicateKey => {
            if out.state.is_empty() {
                return None;
            }
            let i = rng.random_range(0..out.state.len());
            let e = out.state[i].clone();
            out.state.insert(i, e);
        }
        Mutation::ShiftCutLater | Mutation::ShiftCutEarlier => {
            let mut options = Vec::new();
            for (&r, &v) in &cp.vpogc {
                if r.index() >= ix.log_nodes.len() {
                    continue;
                }
                let locals = local_positions(ix, r.index());
                let target = if m == Mutation::ShiftCutLater {
                    locals.iter().find(|&&x| x >= v).map(|x| x + 1)
                } else {
                    locals.iter().rev().find(|&&x| x < v).copied()
                };
                if let Some(t) = target {
                    options.push((r, t));
                }
            }
            let &(r, t) = options.choose(rng)?;
            out.vpogc.insert(r, t);
        }
    }
    Some(out)
}
