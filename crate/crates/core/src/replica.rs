//! One replica's database engine: lock table, live/stable cells with
//! copy-on-write at the initiator, and the commit-log.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{
    color_of, Color, CommitLogEntry, ConflictResolver, CpNum, Key, ModelError, ReplicaId,
    ResolverKind, Schema, Timestamp, Transaction, TxnId, TxnSpec, Versioned, Write,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplicaError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{txn} writes {key} without holding its lock")]
    LockNotHeld { txn: TxnId, key: Key },
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("key {0} is not in the schema")]
    UnknownKey(Key),
    #[error("transaction touches no keys")]
    EmptyTxn,
    #[error("protocol violation at {replica}: {detail}")]
    Protocol { replica: ReplicaId, detail: String },
}

pub type Result<T> = std::result::Result<T, ReplicaError>;

/// A database object. Non-initiator replicas only ever use `live`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectCell {
    pub live: Versioned,
    pub stable: Option<Versioned>,
    status: bool,
}

#[derive(Debug, Clone)]
struct ActiveTxn {
    spec: TxnSpec,
    start_cp: CpNum,
    start_color: Option<Color>,
    locks: Vec<Key>,
    holding: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BeginOutcome {
    Acquired(TxnId),
    Blocked { txn: TxnId, blocked_by: Vec<TxnId> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    pub txn: Transaction,
    pub log_index: u64,
    /// Waiting transactions that obtained all their locks on release.
    pub granted: Vec<TxnId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpLogAppend {
    pub log_index: u64,
    pub first: bool,
    pub color_change: Option<(CpNum, CpNum)>,
}

#[derive(Debug, Clone)]
pub struct ReplicaState {
    id: ReplicaId,
    n: u16,
    resolver: ResolverKind,
    keys: Vec<Key>,
    db: BTreeMap<Key, ObjectCell>,
    log: Vec<CommitLogEntry>,
    round_base: CpNum,
    cp: CpNum,
    /// Which raw status bit currently means "available".
    polarity: bool,
    status_writes: u64,
    clock: u64,
    next_seq: u32,
    active: BTreeMap<TxnId, ActiveTxn>,
    locks: BTreeMap<Key, TxnId>,
    waiters: VecDeque<TxnId>,
    applied_remote: BTreeSet<TxnId>,
    first_cplog: BTreeMap<CpNum, u64>,
    msg_count: u64,
    counts: [Vec<u64>; 2],
}

impl ReplicaState {
    pub fn new(id: ReplicaId, n: u16, schema: &Schema, resolver: ResolverKind) -> Self {
        let db = schema
            .keys
            .iter()
            .map(|k| {
                let cell = ObjectCell {
                    live: Versioned::initial(schema.initial_value),
                    stable: None,
                    status: false,
                };
                (k.clone(), cell)
            })
            .collect();
        ReplicaState {
            id,
            n,
            resolver,
            keys: schema.keys.clone(),
            db,
            log: Vec::new(),
            round_base: CpNum::FIRST,
            cp: CpNum::FIRST,
            polarity: true,
            status_writes: 0,
            clock: 0,
            next_seq: 0,
            active: BTreeMap::new(),
            locks: BTreeMap::new(),
            waiters: VecDeque::new(),
            applied_remote: BTreeSet::new(),
            first_cplog: BTreeMap::new(),
            msg_count: 0,
            counts: [vec![0; n as usize], vec![0; n as usize]],
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn is_initiator(&self) -> bool {
        self.id.is_initiator()
    }

    pub fn replica_count(&self) -> u16 {
        self.n
    }

    pub fn resolver(&self) -> ResolverKind {
        self.resolver
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn log(&self) -> &[CommitLogEntry] {
        &self.log
    }

    pub fn cell(&self, key: &Key) -> Option<&ObjectCell> {
        self.db.get(key)
    }

    /// Current cpNum of this replica.
    pub fn cp(&self) -> CpNum {
        self.cp
    }

    pub fn round_base(&self) -> CpNum {
        self.round_base
    }

    pub fn repl_color(&self) -> Color {
        color_of(self.cp, self.round_base).expect("replica cpNum stays within its round")
    }

    pub fn live_state(&self) -> BTreeMap<Key, Versioned> {
        self.db.iter().map(|(k, c)| (k.clone(), c.live)).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn status_writes(&self) -> u64 {
        self.status_writes
    }

    pub fn msg_count(&self) -> u64 {
        self.msg_count
    }

    pub fn counts(&self, slot: usize) -> &[u64] {
        &self.counts[slot]
    }

    pub fn first_cplog(&self, cp: CpNum) -> Option<u64> {
        self.first_cplog.get(&cp).copied()
    }

    pub fn has_applied(&self, txn: TxnId) -> bool {
        self.applied_remote.contains(&txn)
    }

    fn violation(&self, detail: impl Into<String>) -> ReplicaError {
        ReplicaError::Protocol {
            replica: self.id,
            detail: detail.into(),
        }
    }

    fn cell_mut(&mut self, key: &Key) -> Result<&mut ObjectCell> {
        self.db
            .get_mut(key)
            .ok_or_else(|| ReplicaError::UnknownKey(key.clone()))
    }

    pub fn is_available(&self, key: &Key) -> bool {
        self.db.get(key).is_some_and(|c| c.status == self.polarity)
    }

    fn mark_available(&mut self, key: &Key) -> Result<()> {
        let polarity = self.polarity;
        let cell = self.cell_mut(key)?;
        if cell.status != polarity {
            cell.status = polarity;
            self.status_writes += 1;
        }
        Ok(())
    }

    fn append(&mut self, entry: CommitLogEntry) -> u64 {
        self.log.push(entry);
        (self.log.len() - 1) as u64
    }

    // ---- local transactions -------------------------------------------

    /// Start a client transaction: record its start colour and request all
    /// of its locks at once.
    pub fn begin_local(&mut self, spec: TxnSpec) -> Result<BeginOutcome> {
        let locks = spec.lock_set();
        if locks.is_empty() {
            return Err(ReplicaError::EmptyTxn);
        }
        if let Some(k) = locks.iter().find(|k| !self.db.contains_key(*k)) {
            return Err(ReplicaError::UnknownKey(k.clone()));
        }
        let id = TxnId::new(self.id, self.next_seq);
        self.next_seq += 1;
        let start_color = self.is_initiator().then(|| self.repl_color());
        let blocked_by: BTreeSet<TxnId> = locks
            .iter()
            .filter_map(|k| self.locks.get(k).copied())
            .collect();
        let holding = blocked_by.is_empty();
        if holding {
            for k in &locks {
                self.locks.insert(k.clone(), id);
            }
        } else {
            self.waiters.push_back(id);
        }
        self.active.insert(
            id,
            ActiveTxn {
                spec,
                start_cp: self.cp,
                start_color,
                locks,
                holding,
            },
        );
        Ok(if holding {
            BeginOutcome::Acquired(id)
        } else {
            BeginOutcome::Blocked {
                txn: id,
                blocked_by: blocked_by.into_iter().collect(),
            }
        })
    }

    /// Colour of an active transaction's start, re-read against the current round.
    fn effective_start(&self, start_cp: CpNum) -> Result<Color> {
        Ok(color_of(start_cp, self.round_base)?)
    }

    /// True if some active (holding or waiting) transaction started with `color`
    /// in the current round.
    pub fn any_active_started(&self, color: Color) -> bool {
        self.active
            .values()
            .any(|t| color_of(t.start_cp, self.round_base) == Ok(color))
    }

    /// Commit a transaction that holds all its locks: apply its buffered
    /// writes, append it to the commit-log and release its locks.
    pub fn commit_local(&mut self, txn: TxnId) -> Result<CommitOutcome> {
        let active = self
            .active
            .get(&txn)
            .cloned()
            .ok_or(ReplicaError::UnknownTxn(txn))?;
        if !active.holding {
            return Err(self.violation(format!("{txn} committed while waiting for locks")));
        }
        let start = if self.is_initiator() {
            Some(self.effective_start(active.start_cp)?)
        } else {
            None
        };
        let mut writes = Vec::with_capacity(active.spec.writes.len());
        for (key, value) in &active.spec.writes {
            if self.locks.get(key) != Some(&txn) {
                return Err(ReplicaError::LockNotHeld {
                    txn,
                    key: key.clone(),
                });
            }
            self.clock += 1;
            let w = Write {
                key: key.clone(),
                value: *value,
                ts: Timestamp::new(self.clock, self.id),
            };
            self.apply_write(start, &w.key, w.versioned())?;
            writes.push(w);
        }
        let end = self.is_initiator().then(|| self.repl_color());
        let record = Transaction {
            id: txn,
            read_set: active.spec.reads.clone(),
            write_set: writes,
            start_color: active.start_color,
            end_color: end,
        };
        let log_index = self.append(CommitLogEntry::LocalTxn(record.clone()));
        if let (Some(start), Some(end)) = (start, end) {
            self.epilogue(start, end, &record)?;
        }
        self.active.remove(&txn);
        for k in &active.locks {
            self.locks.remove(k);
        }
        let granted = self.grant_waiters();
        Ok(CommitOutcome {
            txn: record,
            log_index,
            granted,
        })
    }

    fn grant_waiters(&mut self) -> Vec<TxnId> {
        let mut granted = Vec::new();
        let mut still = VecDeque::new();
        while let Some(id) = self.waiters.pop_front() {
            let locks = &self.active[&id].locks;
            if locks.iter().all(|k| !self.locks.contains_key(k)) {
                for k in locks.clone() {
                    self.locks.insert(k, id);
                }
                self.active.get_mut(&id).expect("waiter is active").holding = true;
                granted.push(id);
            } else {
                still.push_back(id);
            }
        }
        self.waiters = still;
        granted
    }

    /// Copy-on-write at the initiator followed by the resolver merge into `live`.
    /// `start` is `None` at non-initiators.
    pub fn apply_write(
        &mut self,
        start: Option<Color>,
        key: &Key,
        incoming: Versioned,
    ) -> Result<()> {
        let available = self.is_available(key);
        let resolver = self.resolver;
        let mut mark = false;
        let cell = self.cell_mut(key)?;
        match start {
            Some(Color::Yellow) => {
                if !available {
                    cell.stable = Some(cell.live);
                }
            }
            Some(Color::Red) => {
                if !available {
                    cell.stable = Some(cell.live);
                    mark = true;
                }
            }
            Some(Color::Green) => {
                cell.stable = None;
            }
            None => {}
        }
        cell.live = resolver.resolve(cell.live, incoming)?;
        if mark {
            self.mark_available(key)?;
        }
        Ok(())
    }

    /// Post-commit bookkeeping for transactions that started yellow.
    fn epilogue(&mut self, start: Color, end: Color, txn: &Transaction) -> Result<()> {
        if start != Color::Yellow {
            return Ok(());
        }
        for w in &txn.write_set {
            match end {
                Color::Yellow => self.cell_mut(&w.key)?.stable = None,
                Color::Red => self.mark_available(&w.key)?,
                Color::Green => {
                    return Err(self.violation(format!("{} started yellow and ended green", txn.id)))
                }
            }
        }
        Ok(())
    }

    // ---- remote transactions ------------------------------------------

    /// Replay a transaction received from another replica. Returns the log
    /// index of the new `ReplicatedTxn` entry, or `None` for a duplicate.
    pub fn execute_remote(&mut self, txn: &Transaction) -> Result<Option<u64>> {
        if txn.id.replica == self.id {
            return Err(self.violation(format!("received own transaction {}", txn.id)));
        }
        if self.applied_remote.contains(&txn.id) {
            return Ok(None);
        }
        if let Some(max) = txn.write_set.iter().map(|w| w.ts.counter).max() {
            self.clock = self.clock.max(max);
        }
        let color = self.is_initiator().then(|| self.repl_color());
        for w in &txn.write_set {
            self.apply_write(color, &w.key, w.versioned())?;
        }
        if color == Some(Color::Yellow) {
            for w in &txn.write_set {
                self.cell_mut(&w.key)?.stable = None;
            }
        }
        self.applied_remote.insert(txn.id);
        Ok(Some(self.append(CommitLogEntry::ReplicatedTxn(txn.id))))
    }

    // ---- colour state -------------------------------------------------

    /// Non-initiator cut: CAS the colour from green to yellow for round `cp`,
    /// then append `CpLog(cp)`. Both halves tolerate repetition.
    pub fn append_cplog(&mut self, cp: CpNum) -> Result<CpLogAppend> {
        if self.is_initiator() {
            return Err(self.violation("initiator received a cut request"));
        }
        if !cp.is_odd() {
            return Err(self.violation(format!("CpLog for non-round cpNum {cp}")));
        }
        if self.cp < cp {
            return Err(self.violation(format!(
                "cut for round {cp} while still at cpNum {}",
                self.cp
            )));
        }
        let mut color_change = None;
        if self.cp == cp {
            let from = self.cp;
            self.cp = cp.yellow();
            self.round_base = cp;
            color_change = Some((from, self.cp));
        }
        let log_index = self.append(CommitLogEntry::CpLog(cp));
        let first = !self.first_cplog.contains_key(&cp);
        if first {
            self.first_cplog.insert(cp, log_index);
        }
        Ok(CpLogAppend {
            log_index,
            first,
            color_change,
        })
    }

    /// Initiator cut marker, appended at the yellow-to-red switch.
    pub fn mark_local_cut(&mut self, cp: CpNum) -> Result<u64> {
        if !self.is_initiator() {
            return Err(self.violation("only the initiator marks a local cut"));
        }
        let idx = self.append(CommitLogEntry::CpLog(cp));
        self.first_cplog.insert(cp, idx);
        Ok(idx)
    }

    /// Initiator colour transition within the current round.
    pub fn set_initiator_color(&mut self, color: Color) -> Result<(CpNum, CpNum)> {
        let from = self.cp;
        let to = match color {
            Color::Green => return Err(self.violation("green is reached by finishing a round")),
            Color::Yellow => self.round_base.yellow(),
            Color::Red => self.round_base.red(),
        };
        if to <= from {
            return Err(self.violation(format!("colour cannot move from {from} to {to}")));
        }
        self.cp = to;
        Ok((from, to))
    }

    /// Initiator: the red number becomes the next round's green and the
    /// meaning of the status bit swaps. No cell is touched.
    pub fn finish_round(&mut self) -> Result<(CpNum, CpNum)> {
        if self.cp != self.round_base.red() {
            return Err(self.violation("round finished before turning red"));
        }
        if let Some(k) = self.keys.iter().find(|k| !self.is_available(k)) {
            return Err(self.violation(format!("key {k} not flushed at round end")));
        }
        if let Some(k) = self
            .db
            .iter()
            .find(|(_, c)| c.stable.is_some())
            .map(|(k, _)| k)
        {
            return Err(self.violation(format!("stable copy of {k} left at round end")));
        }
        let from = self.round_base;
        self.round_base = self.round_base.next_round();
        self.polarity = !self.polarity;
        Ok((from, self.round_base))
    }

    /// Non-initiator MessageSender: the first CpLog of round `cp` turns the replica red.
    pub fn turn_red(&mut self, cp: CpNum) -> Result<(CpNum, CpNum)> {
        if self.cp != cp.yellow() {
            return Err(self.violation(format!("CpLog({cp}) processed at cpNum {}", self.cp)));
        }
        let from = self.cp;
        self.cp = cp.red();
        Ok((from, self.cp))
    }

    pub fn bump_msg_count(&mut self) {
        self.msg_count += 1;
    }

    pub fn take_msg_count(&mut self) -> u64 {
        std::mem::take(&mut self.msg_count)
    }

    /// Initiator: record the first delivery of a replicate message from `src`.
    pub fn count_delivery(&mut self, src: ReplicaId, cp: CpNum) {
        self.counts[cp.counter_slot()][src.index()] += 1;
    }

    pub fn reset_counts(&mut self, slot: usize) {
        self.counts[slot].iter_mut().for_each(|c| *c = 0);
    }

    // ---- checkpoint flush ---------------------------------------------

    /// Flush one key into the checkpoint and leave it marked available.
    pub fn flush_key(&mut self, key: &Key) -> Result<Versioned> {
        if self.is_available(key) {
            let cell = self.cell_mut(key)?;
            match cell.stable.take() {
                Some(v) => Ok(v),
                None => Err(self.violation(format!("{key} available without a stable copy"))),
            }
        } else {
            self.mark_available(key)?;
            let cell = self.cell_mut(key)?;
            Ok(cell.stable.take().unwrap_or(cell.live))
        }
    }

    /// Apply a write belonging to the checkpoint onto a not-yet-flushed stable copy.
    pub fn patch_stable(&mut self, key: &Key, incoming: Versioned) -> Result<()> {
        let available = self.is_available(key);
        let resolver = self.resolver;
        let cell = self.cell_mut(key)?;
        match (&mut cell.stable, available) {
            (Some(v), true) => {
                *v = resolver.resolve(*v, incoming)?;
                Ok(())
            }
            _ => Err(self.violation(format!("no stable copy of {key} to patch"))),
        }
    }

    /// Ids of all transactions (local or replicated) in `log[..end]`.
    pub fn txn_ids_before(&self, end: u64) -> BTreeSet<TxnId> {
        self.log[..end as usize]
            .iter()
            .filter_map(|e| match e {
                CommitLogEntry::LocalTxn(t) => Some(t.id),
                CommitLogEntry::ReplicatedTxn(id) => Some(*id),
                CommitLogEntry::CpLog(_) => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReplicaId;

    fn schema() -> Schema {
        Schema::with_key_count(4, 0)
    }

    fn k(i: usize) -> Key {
        schema().keys[i].clone()
    }

    fn spec(writes: &[(usize, i64)]) -> TxnSpec {
        TxnSpec {
            reads: vec![],
            writes: writes.iter().map(|(i, v)| (k(*i), *v)).collect(),
        }
    }

    fn r1() -> ReplicaState {
        ReplicaState::new(ReplicaId(0), 2, &schema(), ResolverKind::Lww)
    }

    fn run_local(r: &mut ReplicaState, writes: &[(usize, i64)]) -> CommitOutcome {
        let id = match r.begin_local(spec(writes)).unwrap() {
            BeginOutcome::Acquired(id) => id,
            other => panic!("blocked: {other:?}"),
        };
        r.commit_local(id).unwrap()
    }

    fn ts(c: u64, r: u16) -> Timestamp {
        Timestamp::new(c, ReplicaId(r))
    }

    #[test]
    fn green_start_erases_stable() {
        let mut r = r1();
        r.db.get_mut(&k(0)).unwrap().stable = Some(Versioned::initial(7));
        r.apply_write(Some(Color::Green), &k(0), Versioned::new(3, ts(1, 0)))
            .unwrap();
        let cell = r.cell(&k(0)).unwrap();
        assert_eq!(cell.stable, None);
        assert_eq!(cell.live.value, 3);
    }

    #[test]
    fn red_start_copies_and_marks() {
        let mut r = r1();
        r.apply_write(Some(Color::Red), &k(1), Versioned::new(3, ts(1, 0)))
            .unwrap();
        assert_eq!(r.cell(&k(1)).unwrap().stable, Some(Versioned::initial(0)));
        assert!(r.is_available(&k(1)));
        // a second red write leaves the copy alone
        r.apply_write(Some(Color::Red), &k(1), Versioned::new(4, ts(2, 0)))
            .unwrap();
        assert_eq!(r.cell(&k(1)).unwrap().stable, Some(Versioned::initial(0)));
        assert_eq!(r.cell(&k(1)).unwrap().live.value, 4);
    }

    #[test]
    fn yellow_start_with_available_only_touches_live() {
        let mut r = r1();
        r.apply_write(Some(Color::Red), &k(2), Versioned::new(3, ts(1, 0)))
            .unwrap();
        r.apply_write(Some(Color::Yellow), &k(2), Versioned::new(5, ts(2, 0)))
            .unwrap();
        let cell = r.cell(&k(2)).unwrap();
        assert_eq!(cell.stable, Some(Versioned::initial(0)));
        assert_eq!(cell.live.value, 5);
    }

    #[test]
    fn green_fast_path_leaves_no_stable_copies() {
        let mut r = r1();
        let out = run_local(&mut r, &[(0, 1), (1, 2)]);
        assert_eq!(out.txn.start_color, Some(Color::Green));
        assert_eq!(out.txn.end_color, Some(Color::Green));
        assert!(r.db.values().all(|c| c.stable.is_none()));
    }

    #[test]
    fn yellow_start_red_end_marks_write_set_available() {
        let mut r = r1();
        r.set_initiator_color(Color::Yellow).unwrap();
        let id = match r.begin_local(spec(&[(0, 9), (3, 4)])).unwrap() {
            BeginOutcome::Acquired(id) => id,
            _ => unreachable!(),
        };
        r.set_initiator_color(Color::Red).unwrap();
        let out = r.commit_local(id).unwrap();
        assert_eq!(out.txn.start_color, Some(Color::Yellow));
        assert_eq!(out.txn.end_color, Some(Color::Red));
        assert!(r.is_available(&k(0)) && r.is_available(&k(3)));
        assert!(!r.is_available(&k(1)));
        // the checkpoint must see the pre-transaction value
        assert_eq!(r.flush_key(&k(0)).unwrap(), Versioned::initial(0));
    }

    #[test]
    fn yellow_start_yellow_end_keeps_live() {
        let mut r = r1();
        r.set_initiator_color(Color::Yellow).unwrap();
        run_local(&mut r, &[(0, 9)]);
        assert_eq!(r.cell(&k(0)).unwrap().stable, None);
        r.set_initiator_color(Color::Red).unwrap();
        assert_eq!(r.flush_key(&k(0)).unwrap().value, 9);
    }

    #[test]
    fn non_initiator_commit_appends_one_entry() {
        let mut r = ReplicaState::new(ReplicaId(1), 2, &schema(), ResolverKind::Lww);
        let out = run_local(&mut r, &[(0, 1)]);
        assert_eq!(r.log().len(), 1);
        assert_eq!(out.log_index, 0);
        assert_eq!(out.txn.start_color, None);
        assert!(r.cell(&k(0)).unwrap().stable.is_none());
    }

    #[test]
    fn locks_block_and_grant_in_order() {
        let mut r = r1();
        let a = match r.begin_local(spec(&[(0, 1)])).unwrap() {
            BeginOutcome::Acquired(id) => id,
            _ => unreachable!(),
        };
        let b = r.begin_local(spec(&[(0, 2), (1, 2)])).unwrap();
        let BeginOutcome::Blocked { txn: b, blocked_by } = b else {
            panic!("expected a wait")
        };
        assert_eq!(blocked_by, vec![a]);
        assert!(r.commit_local(b).is_err());
        let out = r.commit_local(a).unwrap();
        assert_eq!(out.granted, vec![b]);
        r.commit_local(b).unwrap();
        assert_eq!(r.cell(&k(0)).unwrap().live.value, 2);
    }

    #[test]
    fn remote_duplicate_is_ignored() {
        let mut src = ReplicaState::new(ReplicaId(1), 2, &schema(), ResolverKind::Counter);
        let t = run_local(&mut src, &[(0, 5)]).txn;
        let mut r = ReplicaState::new(ReplicaId(2), 3, &schema(), ResolverKind::Counter);
        assert_eq!(r.execute_remote(&t).unwrap(), Some(0));
        let before = r.live_state();
        assert_eq!(r.execute_remote(&t).unwrap(), None);
        assert_eq!(r.live_state(), before);
        assert_eq!(r.log().len(), 1);
    }

    #[test]
    fn remote_older_write_keeps_live_but_logs() {
        let mut r = ReplicaState::new(ReplicaId(2), 3, &schema(), ResolverKind::Lww);
        r.apply_write(None, &k(0), Versioned::new(8, ts(10, 2)))
            .unwrap();
        let old = Transaction {
            id: TxnId::new(ReplicaId(1), 0),
            read_set: vec![],
            write_set: vec![Write {
                key: k(0),
                value: 1,
                ts: ts(3, 1),
            }],
            start_color: None,
            end_color: None,
        };
        r.execute_remote(&old).unwrap();
        assert_eq!(r.cell(&k(0)).unwrap().live, Versioned::new(8, ts(10, 2)));
        assert_eq!(r.log().len(), 1);
    }

    #[test]
    fn red_initiator_copies_before_remote_overwrite() {
        let mut r = r1();
        r.set_initiator_color(Color::Yellow).unwrap();
        r.set_initiator_color(Color::Red).unwrap();
        let t = Transaction {
            id: TxnId::new(ReplicaId(1), 0),
            read_set: vec![],
            write_set: vec![Write {
                key: k(2),
                value: 6,
                ts: ts(1, 1),
            }],
            start_color: None,
            end_color: None,
        };
        r.execute_remote(&t).unwrap();
        assert_eq!(r.cell(&k(2)).unwrap().stable, Some(Versioned::initial(0)));
        assert_eq!(r.cell(&k(2)).unwrap().live.value, 6);
    }

    #[test]
    fn cplog_cas_is_idempotent() {
        let mut r = ReplicaState::new(ReplicaId(1), 2, &schema(), ResolverKind::Lww);
        let first = r.append_cplog(CpNum(1)).unwrap();
        assert_eq!(first.color_change, Some((CpNum(1), CpNum(2))));
        assert!(first.first);
        assert_eq!(r.repl_color(), Color::Yellow);
        let dup = r.append_cplog(CpNum(1)).unwrap();
        assert_eq!(dup.color_change, None);
        assert!(!dup.first);
        r.turn_red(CpNum(1)).unwrap();
        assert_eq!(r.repl_color(), Color::Red);
        let late = r.append_cplog(CpNum(1)).unwrap();
        assert_eq!(late.color_change, None);
        assert_eq!(r.repl_color(), Color::Red);
        assert_eq!(r.log().len(), 3);
    }

    #[test]
    fn flush_untouched_key_writes_live() {
        let mut r = r1();
        run_local(&mut r, &[(1, 4)]);
        r.set_initiator_color(Color::Yellow).unwrap();
        r.set_initiator_color(Color::Red).unwrap();
        assert_eq!(r.flush_key(&k(1)).unwrap().value, 4);
        assert!(r.is_available(&k(1)));
    }

    #[test]
    fn polarity_swap_touches_no_cell() {
        let mut r = r1();
        r.set_initiator_color(Color::Yellow).unwrap();
        r.set_initiator_color(Color::Red).unwrap();
        for key in schema().keys {
            r.flush_key(&key).unwrap();
        }
        let writes = r.status_writes();
        r.finish_round().unwrap();
        assert_eq!(r.status_writes(), writes);
        assert!(schema().keys.iter().all(|k| !r.is_available(k)));
        assert_eq!(r.round_base(), CpNum(3));
        assert_eq!(r.repl_color(), Color::Green);
    }

    #[test]
    fn red_start_becomes_green_in_next_round() {
        let mut r = r1();
        r.set_initiator_color(Color::Yellow).unwrap();
        r.set_initiator_color(Color::Red).unwrap();
        let id = match r.begin_local(spec(&[(0, 1)])).unwrap() {
            BeginOutcome::Acquired(id) => id,
            _ => unreachable!(),
        };
        for key in schema().keys {
            r.flush_key(&key).unwrap();
        }
        r.finish_round().unwrap();
        assert!(r.any_active_started(Color::Green));
        r.commit_local(id).unwrap();
        assert!(r.cell(&k(0)).unwrap().stable.is_none());
    }
}
