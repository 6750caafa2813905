//! Happens-before graph rebuilt from a trace.
//!
//! Nodes are trace records. Edges are program order at each replica and
//! send -> receive for every delivered message. A checkpoint adds one
//! extra node spliced into each replica's program order at its cut.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::model::{MsgId, ReplicaId, ResolverKind, Schema, Transaction, TxnId};
use crate::trace::{Event, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace is empty or does not start with run_start")]
    NoRunStart,
    #[error("record {seq}: replica {replica} outside the group")]
    UnknownReplica { seq: u64, replica: ReplicaId },
    #[error("record {seq}: receive of message {msg} that was never sent")]
    UnknownMessage { seq: u64, msg: u64 },
    #[error("record {seq}: message {msg} sent twice")]
    DuplicateSend { seq: u64, msg: u64 },
    #[error("record {seq}: {txn} committed twice")]
    DuplicateCommit { seq: u64, txn: TxnId },
    #[error("record {seq}: {txn} committed at {replica}")]
    ForeignCommit {
        seq: u64,
        txn: TxnId,
        replica: ReplicaId,
    },
    #[error("record {seq}: log index {got} at {replica}, expected {expected}")]
    LogGap {
        seq: u64,
        replica: ReplicaId,
        got: u64,
        expected: u64,
    },
}

/// Everything the checks need, extracted from one trace.
#[derive(Debug, Clone)]
pub struct TraceIndex {
    pub replicas: u16,
    pub schema: Schema,
    pub resolver: ResolverKind,
    pub checkpointing: bool,
    /// Committed transactions and the node of their local commit.
    pub commits: BTreeMap<TxnId, (usize, Transaction)>,
    /// Per replica, commit-log index -> node that appended it.
    pub log_nodes: Vec<Vec<usize>>,
    /// Last node of each replica, if it has any.
    pub last: Vec<Option<usize>>,
    /// Program-order predecessor of each node.
    pub prev: Vec<Option<usize>>,
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
}

impl TraceIndex {
    pub fn build(trace: &[TraceRecord]) -> Result<TraceIndex, TraceError> {
        let Some(Event::RunStart {
            replicas,
            keys,
            initial_value,
            resolver,
            checkpointing,
        }) = trace.first().map(|r| &r.event)
        else {
            return Err(TraceError::NoRunStart);
        };
        let n = *replicas as usize;
        let len = trace.len();
        let mut ix = TraceIndex {
            replicas: *replicas,
            schema: Schema {
                keys: keys.clone(),
                initial_value: *initial_value,
            },
            resolver: *resolver,
            checkpointing: *checkpointing,
            commits: BTreeMap::new(),
            log_nodes: vec![Vec::new(); n],
            last: vec![None; n],
            prev: vec![None; len],
            succ: vec![Vec::new(); len],
            pred: vec![Vec::new(); len],
        };
        let mut sends: BTreeMap<MsgId, usize> = BTreeMap::new();
        for (node, rec) in trace.iter().enumerate() {
            let r = rec.replica.index();
            if r >= n {
                return Err(TraceError::UnknownReplica {
                    seq: rec.seq,
                    replica: rec.replica,
                });
            }
            if let Some(p) = ix.last[r] {
                ix.prev[node] = Some(p);
                ix.edge(p, node);
            }
            ix.last[r] = Some(node);
            match &rec.event {
                Event::Send { msg, .. } => {
                    if sends.insert(*msg, node).is_some() {
                        return Err(TraceError::DuplicateSend {
                            seq: rec.seq,
                            msg: msg.0,
                        });
                    }
                }
                Event::Receive { msg, .. } => {
                    let s = *sends.get(msg).ok_or(TraceError::UnknownMessage {
                        seq: rec.seq,
                        msg: msg.0,
                    })?;
                    ix.edge(s, node);
                }
                Event::Commit { txn, .. } => {
                    if txn.id.replica != rec.replica {
                        return Err(TraceError::ForeignCommit {
                            seq: rec.seq,
                            txn: txn.id,
                            replica: rec.replica,
                        });
                    }
                    if ix.commits.insert(txn.id, (node, txn.clone())).is_some() {
                        return Err(TraceError::DuplicateCommit {
                            seq: rec.seq,
                            txn: txn.id,
                        });
                    }
                }
                _ => {}
            }
            if let Some(idx) = rec.event.appended_log_index() {
                let expected = ix.log_nodes[r].len() as u64;
                if idx != expected {
                    return Err(TraceError::LogGap {
                        seq: rec.seq,
                        replica: rec.replica,
                        got: idx,
                        expected,
                    });
                }
                ix.log_nodes[r].push(node);
            }
        }
        Ok(ix)
    }

    fn edge(&mut self, a: usize, b: usize) {
        self.succ[a].push(b);
        self.pred[b].push(a);
    }

    pub fn node_count(&self) -> usize {
        self.succ.len()
    }
}

/// Where a checkpoint sits in one replica's program order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Splice {
    pub after: Option<usize>,
    pub before: Option<usize>,
}

/// The base graph plus one checkpoint node (index `cp`).
pub struct CutGraph<'a> {
    pub ix: &'a TraceIndex,
    pub cp: usize,
    pub splices: Vec<Splice>,
}

impl<'a> CutGraph<'a> {
    /// `cuts[i]` is the commit-log index at replica `i` that the checkpoint
    /// precedes. Returns `None` for an index past the end of the log.
    pub fn new(ix: &'a TraceIndex, cuts: &[u64]) -> Option<CutGraph<'a>> {
        let mut splices = Vec::with_capacity(cuts.len());
        for (r, &v) in cuts.iter().enumerate() {
            let log = &ix.log_nodes[r];
            let v = v as usize;
            let splice = match v.cmp(&log.len()) {
                std::cmp::Ordering::Less => Splice {
                    after: ix.prev[log[v]],
                    before: Some(log[v]),
                },
                std::cmp::Ordering::Equal => Splice {
                    after: ix.last[r],
                    before: None,
                },
                std::cmp::Ordering::Greater => return None,
            };
            splices.push(splice);
        }
        Some(CutGraph {
            ix,
            cp: ix.node_count(),
            splices,
        })
    }

    pub fn len(&self) -> usize {
        self.cp + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn successors(&self, node: usize, out: &mut Vec<usize>) {
        out.clear();
        if node == self.cp {
            out.extend(self.splices.iter().filter_map(|s| s.before));
            return;
        }
        out.extend_from_slice(&self.ix.succ[node]);
        if self.splices.iter().any(|s| s.after == Some(node)) {
            out.push(self.cp);
        }
    }

    pub fn predecessors(&self, node: usize, out: &mut Vec<usize>) {
        out.clear();
        if node == self.cp {
            out.extend(self.splices.iter().filter_map(|s| s.after));
            return;
        }
        out.extend_from_slice(&self.ix.pred[node]);
        if self.splices.iter().any(|s| s.before == Some(node)) {
            out.push(self.cp);
        }
    }

    /// Nodes reachable from `start` (excluding `start` itself unless on a cycle).
    pub fn reach(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        let mut buf = Vec::new();
        while let Some(u) = queue.pop_front() {
            if forward {
                self.successors(u, &mut buf);
            } else {
                self.predecessors(u, &mut buf);
            }
            for &v in &buf {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.len()];
        let mut buf = Vec::new();
        for u in 0..self.len() {
            self.successors(u, &mut buf);
            for &v in &buf {
                deg[v] += 1;
            }
        }
        deg
    }
}

/// Ancestors of `starts` in the base graph (no checkpoint node), inclusive.
pub fn base_ancestors(ix: &TraceIndex, starts: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; ix.node_count()];
    let mut queue = VecDeque::new();
    for s in starts {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &ix.pred[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}
