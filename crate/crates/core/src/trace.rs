//! Structured simulation events. A trace is the totally ordered list of
//! these records; the verifier rebuilds causality from it alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{
    ChannelKind, Color, CpNum, Key, MessageBody, MsgId, ReplicaId, ResolverKind, Transaction,
    TxnId, Value,
};
use crate::protocol::CheckpointerPhase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub time: u64,
    pub replica: ReplicaId,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    RunStart {
        replicas: u16,
        keys: Vec<Key>,
        initial_value: Value,
        resolver: ResolverKind,
        checkpointing: bool,
    },
    TxnBegin {
        txn: TxnId,
        exec_ticks: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_cp: Option<CpNum>,
    },
    LockWait {
        txn: TxnId,
        blocked_by: Vec<TxnId>,
    },
    LockAcquired {
        txn: TxnId,
    },
    Commit {
        txn: Transaction,
        log_index: u64,
    },
    Send {
        msg: MsgId,
        dst: ReplicaId,
        channel: ChannelKind,
        body: MessageBody,
    },
    Receive {
        msg: MsgId,
        src: ReplicaId,
        channel: ChannelKind,
        duplicate: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_index: Option<u64>,
    },
    ColorChange {
        cp: CpNum,
        round_base: CpNum,
        color: Color,
    },
    CpLogAppend {
        cp: CpNum,
        log_index: u64,
        first: bool,
    },
    Vpolc {
        cp: CpNum,
        log_index: u64,
    },
    Phase {
        cp: CpNum,
        phase: CheckpointerPhase,
    },
    Counters {
        cp: CpNum,
        slot: usize,
        counts: Vec<u64>,
        replies: Vec<u64>,
    },
    CheckpointPatch {
        cp: CpNum,
        txn: TxnId,
        keys: Vec<Key>,
    },
    /// Status-bit writes at the initiator just before and after the swap of
    /// its meaning at round end.
    PolaritySwap {
        cp: CpNum,
        status_writes_before: u64,
        status_writes_after: u64,
    },
    CheckpointDone {
        cp: CpNum,
        /// Cut position at each replica, by replica index.
        vpogc: Vec<u64>,
        cp_set_size: usize,
    },
    Warning {
        message: String,
    },
}

impl Event {
    /// Log index appended by this event, if any.
    pub fn appended_log_index(&self) -> Option<u64> {
        match self {
            Event::Commit { log_index, .. } | Event::CpLogAppend { log_index, .. } => {
                Some(*log_index)
            }
            Event::Receive { log_index, .. } => *log_index,
            _ => None,
        }
    }
}

/// Replication-channel activity only, keyed without any control-dependent
/// numbering: (send time, delivery time, src, dst, txn, duplicate).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplicationDelivery {
    pub sent: u64,
    pub delivered: u64,
    pub src: ReplicaId,
    pub dst: ReplicaId,
    pub txn: TxnId,
    pub duplicate: bool,
}

/// Extract the replication sub-trace as canonical JSON lines.
pub fn replication_subtrace(trace: &[TraceRecord]) -> String {
    let mut sends: BTreeMap<MsgId, (u64, ReplicaId, ReplicaId, TxnId)> = BTreeMap::new();
    let mut rows = Vec::new();
    for rec in trace {
        match &rec.event {
            Event::Send {
                msg,
                dst,
                body: MessageBody::Replicate { txn, .. },
                ..
            } => {
                sends.insert(*msg, (rec.time, rec.replica, *dst, txn.id));
            }
            Event::Receive {
                msg,
                channel: ChannelKind::Replication,
                duplicate,
                ..
            } => {
                if let Some(&(sent, src, dst, txn)) = sends.get(msg) {
                    rows.push(ReplicationDelivery {
                        sent,
                        delivered: rec.time,
                        src,
                        dst,
                        txn,
                        duplicate: *duplicate,
                    });
                }
            }
            _ => {}
        }
    }
    rows.sort();
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec).expect("trace records serialize"));
        out.push('\n');
    }
    out
}
