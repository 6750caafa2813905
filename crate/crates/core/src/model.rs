//! Domain types shared by every layer: replica ids, keys, timestamps,
//! transactions, wire messages, checkpoints and conflict resolvers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("cpNum {msg} is from a round that cannot exist yet (round base {base})")]
    FutureRound { msg: CpNum, base: CpNum },
    #[error("cpNum {msg} is older than the previous round (round base {base})")]
    StaleRound { msg: CpNum, base: CpNum },
    #[error("two writes share timestamp {0}")]
    DuplicateTimestamp(Timestamp),
    #[error("write to key {0}, which is not in the schema")]
    UnknownKey(Key),
}

/// Replica identifier. Replica 0 is the checkpoint initiator.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ReplicaId(pub u16);

impl ReplicaId {
    pub const INITIATOR: ReplicaId = ReplicaId(0);

    pub fn is_initiator(self) -> bool {
        self == Self::INITIATOR
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Globally unique transaction id: source replica plus a per-replica sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId {
    pub replica: ReplicaId,
    pub seq: u32,
}

impl TxnId {
    pub fn new(replica: ReplicaId, seq: u32) -> Self {
        TxnId { replica, seq }
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.t{}", self.replica, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Key(pub String);

impl Key {
    pub fn new(name: impl Into<String>) -> Self {
        Key(name.into())
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Key {
    fn from(s: &str) -> Self {
        Key(s.to_owned())
    }
}

pub type Value = i64;

/// Write timestamp, ordered by counter first and replica id second.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct Timestamp {
    pub counter: u64,
    pub replica: ReplicaId,
}

impl Timestamp {
    /// Timestamp of every key's initial value; all writes sort after it.
    pub const GENESIS: Timestamp = Timestamp {
        counter: 0,
        replica: ReplicaId(0),
    };

    pub fn new(counter: u64, replica: ReplicaId) -> Self {
        Timestamp { counter, replica }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.counter, self.replica)
    }
}

/// A value together with the timestamp of the write that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Versioned {
    pub value: Value,
    pub ts: Timestamp,
}

impl Versioned {
    pub fn new(value: Value, ts: Timestamp) -> Self {
        Versioned { value, ts }
    }

    pub fn initial(value: Value) -> Self {
        Versioned {
            value,
            ts: Timestamp::GENESIS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Green,
    Yellow,
    Red,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Red => "red",
        };
        f.write_str(s)
    }
}

/// Checkpoint number attached to every replicate message in place of a colour.
///
/// Round `k` uses base `2k - 1`: `base` is green, `base + 1` yellow and
/// `base + 2` red. The red number of one round is the green number of the next.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct CpNum(pub u64);

impl CpNum {
    pub const FIRST: CpNum = CpNum(1);

    pub fn yellow(self) -> CpNum {
        CpNum(self.0 + 1)
    }

    pub fn red(self) -> CpNum {
        CpNum(self.0 + 2)
    }

    pub fn next_round(self) -> CpNum {
        CpNum(self.0 + 2)
    }

    /// Odd numbers are green-or-red states; even numbers are yellow.
    pub fn is_odd(self) -> bool {
        self.0 % 2 == 1
    }

    /// Base of the round in which a message stamped `self` counts as green or yellow.
    pub fn membership_round(self) -> CpNum {
        if self.is_odd() {
            self
        } else {
            CpNum(self.0 - 1)
        }
    }

    /// Which counter array at the initiator tracks this round:
    /// `0` (GreenCounts) for bases 1 mod 4, `1` (RedCounts) for bases 3 mod 4.
    pub fn counter_slot(self) -> usize {
        let base = self.membership_round().0.max(1);
        (((base - 1) / 2) % 2) as usize
    }

    /// One-based round ordinal for a round base.
    pub fn round_ordinal(self) -> u64 {
        self.membership_round().0.div_ceil(2)
    }
}

impl fmt::Display for CpNum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Colour of a message stamped `msg` for a replica whose current round base is `base`.
pub fn color_of(msg: CpNum, base: CpNum) -> Result<Color, ModelError> {
    if msg.0 > base.0 + 2 {
        return Err(ModelError::FutureRound { msg, base });
    }
    if msg.0 + 2 < base.0 {
        return Err(ModelError::StaleRound { msg, base });
    }
    Ok(if msg.0 <= base.0 {
        Color::Green
    } else if msg.0 == base.0 + 1 {
        Color::Yellow
    } else {
        Color::Red
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Write {
    pub key: Key,
    pub value: Value,
    pub ts: Timestamp,
}

impl Write {
    pub fn versioned(&self) -> Versioned {
        Versioned::new(self.value, self.ts)
    }
}

/// Read and write intentions of a client transaction before execution.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnSpec {
    #[serde(default)]
    pub reads: Vec<Key>,
    pub writes: Vec<(Key, Value)>,
}

impl TxnSpec {
    /// Sorted, de-duplicated union of read and write keys (the lock set).
    pub fn lock_set(&self) -> Vec<Key> {
        let set: BTreeSet<&Key> = self
            .reads
            .iter()
            .chain(self.writes.iter().map(|(k, _)| k))
            .collect();
        set.into_iter().cloned().collect()
    }
}

/// A committed transaction as recorded in the commit-log and replicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub read_set: Vec<Key>,
    pub write_set: Vec<Write>,
    /// Only populated at the initiator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_color: Option<Color>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_color: Option<Color>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitLogEntry {
    LocalTxn(Transaction),
    ReplicatedTxn(TxnId),
    CpLog(CpNum),
}

impl CommitLogEntry {
    pub fn local_txn(&self) -> Option<&Transaction> {
        match self {
            CommitLogEntry::LocalTxn(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Replication,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MsgId(pub u64);

/// Payload of a message on the wire. A replicate message carries the
/// transaction plus exactly one integer of protocol metadata (`cp`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageBody {
    Replicate { txn: Transaction, cp: CpNum },
    CutForCp { cp: CpNum },
    CutForCpReply { count: u64, cp: CpNum },
}

impl MessageBody {
    pub fn channel(&self) -> ChannelKind {
        match self {
            MessageBody::Replicate { .. } => ChannelKind::Replication,
            _ => ChannelKind::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MsgId,
    pub src: ReplicaId,
    pub dst: ReplicaId,
    pub channel: ChannelKind,
    pub body: MessageBody,
}

/// A completed checkpoint: one value per key plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub cp_num: CpNum,
    pub state: BTreeMap<Key, Versioned>,
    pub cp_set: BTreeSet<TxnId>,
    /// Per-replica cut: commit-log index of the entry that marks the cut.
    pub vpogc: BTreeMap<ReplicaId, u64>,
}

impl Checkpoint {
    /// The empty checkpoint every run implicitly starts from.
    pub fn genesis(schema: &Schema, replicas: u16) -> Checkpoint {
        Checkpoint {
            cp_num: CpNum(0),
            state: schema.initial_state(),
            cp_set: BTreeSet::new(),
            vpogc: (0..replicas).map(|r| (ReplicaId(r), 0)).collect(),
        }
    }
}

/// The fixed key space of the database and each key's initial value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub keys: Vec<Key>,
    pub initial_value: Value,
}

impl Schema {
    pub fn with_key_count(count: usize, initial_value: Value) -> Schema {
        let width = count.saturating_sub(1).to_string().len().max(2);
        Schema {
            keys: (0..count)
                .map(|i| Key(format!("k{:0width$}", i, width = width)))
                .collect(),
            initial_value,
        }
    }

    pub fn initial_state(&self) -> BTreeMap<Key, Versioned> {
        self.keys
            .iter()
            .map(|k| (k.clone(), Versioned::initial(self.initial_value)))
            .collect()
    }
}

/// Deterministic, communication-free merge of a current and an incoming write.
pub trait ConflictResolver {
    fn resolve(&self, current: Versioned, incoming: Versioned) -> Result<Versioned, ModelError>;
}

/// Keeps the write with the larger timestamp.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastWriterWins;

impl ConflictResolver for LastWriterWins {
    fn resolve(&self, current: Versioned, incoming: Versioned) -> Result<Versioned, ModelError> {
        match current.ts.cmp(&incoming.ts) {
            std::cmp::Ordering::Equal => Err(ModelError::DuplicateTimestamp(current.ts)),
            std::cmp::Ordering::Less => Ok(incoming),
            std::cmp::Ordering::Greater => Ok(current),
        }
    }
}

/// Grow-only counter: every write is an increment, values add up.
#[derive(Debug, Clone, Copy, Default)]
pub struct GrowOnlyCounter;

impl ConflictResolver for GrowOnlyCounter {
    fn resolve(&self, current: Versioned, incoming: Versioned) -> Result<Versioned, ModelError> {
        if current.ts == incoming.ts {
            return Err(ModelError::DuplicateTimestamp(current.ts));
        }
        Ok(Versioned {
            value: current.value + incoming.value,
            ts: current.ts.max(incoming.ts),
        })
    }
}

/// Merge `writes` into `state` one at a time. For the provided resolvers the
/// result does not depend on the order of `writes`.
pub fn fold_writes<'a>(
    resolver: &impl ConflictResolver,
    mut state: BTreeMap<Key, Versioned>,
    writes: impl IntoIterator<Item = &'a Write>,
) -> Result<BTreeMap<Key, Versioned>, ModelError> {
    for w in writes {
        let cur = state
            .get_mut(&w.key)
            .ok_or_else(|| ModelError::UnknownKey(w.key.clone()))?;
        *cur = resolver.resolve(*cur, w.versioned())?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolverKind {
    #[default]
    Lww,
    Counter,
}

impl ConflictResolver for ResolverKind {
    fn resolve(&self, current: Versioned, incoming: Versioned) -> Result<Versioned, ModelError> {
        match self {
            ResolverKind::Lww => LastWriterWins.resolve(current, incoming),
            ResolverKind::Counter => GrowOnlyCounter.resolve(current, incoming),
        }
    }
}

impl fmt::Display for ResolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResolverKind::Lww => "lww",
            ResolverKind::Counter => "counter",
        })
    }
}
