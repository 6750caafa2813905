//! The checkpoint state machine: the initiator's asynchronous checkpointer,
//! and the MessageSender / MessageReceiver behaviour at every replica.
//!
//! Every handler appends its observable consequences to an [`Effects`]
//! list in the order they happen; the simulator turns them into trace
//! records and channel sends.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{
    color_of, Checkpoint, Color, CommitLogEntry, ConflictResolver, CpNum, Key, Message,
    MessageBody, ReplicaId, Transaction, TxnId, Versioned,
};
use crate::replica::{CpLogAppend, ReplicaError, ReplicaState, Result};
use crate::trace::Event;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointerPhase {
    Idle,
    /// Yellow; waiting for transactions that started green.
    DrainGreen,
    /// Red; waiting for transactions that started yellow.
    DrainYellow,
    Flushing,
    AwaitReplies,
    AwaitCounts,
    Done,
}

impl CheckpointerPhase {
    pub const ACTIVE: [CheckpointerPhase; 5] = [
        CheckpointerPhase::DrainGreen,
        CheckpointerPhase::DrainYellow,
        CheckpointerPhase::Flushing,
        CheckpointerPhase::AwaitReplies,
        CheckpointerPhase::AwaitCounts,
    ];

    pub fn is_active(self) -> bool {
        !matches!(self, CheckpointerPhase::Idle | CheckpointerPhase::Done)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Trace(Event),
    Send {
        dst: ReplicaId,
        body: MessageBody,
    },
    /// Ask to be called back through [`Checkpointer::flush_step`].
    FlushTick,
    /// A finished checkpoint. Only the initiator's entry of `vpogc` is filled.
    Completed(Checkpoint),
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Effects(pub Vec<Effect>);

impl Effects {
    pub fn trace(&mut self, e: Event) {
        self.0.push(Effect::Trace(e));
    }

    pub fn send(&mut self, dst: ReplicaId, body: MessageBody) {
        self.0.push(Effect::Send { dst, body });
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, Effect> {
        self.0.drain(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn violation(replica: ReplicaId, detail: impl Into<String>) -> ReplicaError {
    ReplicaError::Protocol {
        replica,
        detail: detail.into(),
    }
}

fn color_event(r: &ReplicaState) -> Event {
    Event::ColorChange {
        cp: r.cp(),
        round_base: r.round_base(),
        color: r.repl_color(),
    }
}

fn cplog_events(r: &ReplicaState, cp: CpNum, a: CpLogAppend, fx: &mut Effects) {
    if a.color_change.is_some() {
        fx.trace(color_event(r));
    }
    fx.trace(Event::CpLogAppend {
        cp,
        log_index: a.log_index,
        first: a.first,
    });
    if a.first {
        fx.trace(Event::Vpolc {
            cp,
            log_index: a.log_index,
        });
    }
}

/// The initiator's checkpointer. One round is active at a time; triggers
/// that arrive during a round are queued and start as soon as it finishes.
#[derive(Debug, Clone)]
pub struct Checkpointer {
    phase: CheckpointerPhase,
    pending: u32,
    flush_chunk: usize,
    flush_cursor: usize,
    key_pos: BTreeMap<Key, usize>,
    output: BTreeMap<Key, Versioned>,
    cp_set: BTreeSet<TxnId>,
    marker: Option<u64>,
    replies: BTreeMap<ReplicaId, u64>,
    completed: u64,
}

impl Checkpointer {
    pub fn new(flush_chunk: usize) -> Self {
        Checkpointer {
            phase: CheckpointerPhase::Idle,
            pending: 0,
            flush_chunk: flush_chunk.max(1),
            flush_cursor: 0,
            key_pos: BTreeMap::new(),
            output: BTreeMap::new(),
            cp_set: BTreeSet::new(),
            marker: None,
            replies: BTreeMap::new(),
            completed: 0,
        }
    }

    pub fn phase(&self) -> CheckpointerPhase {
        self.phase
    }

    pub fn pending(&self) -> u32 {
        self.pending
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    fn set_phase(&mut self, r1: &ReplicaState, phase: CheckpointerPhase, fx: &mut Effects) {
        self.phase = phase;
        fx.trace(Event::Phase {
            cp: r1.round_base(),
            phase,
        });
    }

    pub fn trigger(&mut self, r1: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        self.pending += 1;
        self.poll(r1, fx)
    }

    fn start_round(&mut self, r1: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        if self.key_pos.is_empty() {
            self.key_pos = r1
                .keys()
                .iter()
                .enumerate()
                .map(|(i, k)| (k.clone(), i))
                .collect();
        }
        self.output.clear();
        self.cp_set.clear();
        self.replies.clear();
        self.marker = None;
        self.flush_cursor = 0;
        r1.set_initiator_color(Color::Yellow)?;
        fx.trace(color_event(r1));
        self.set_phase(r1, CheckpointerPhase::DrainGreen, fx);
        Ok(())
    }

    /// Advance as far as the current state allows.
    pub fn poll(&mut self, r1: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        loop {
            match self.phase {
                CheckpointerPhase::Idle | CheckpointerPhase::Done => {
                    if self.pending == 0 {
                        return Ok(());
                    }
                    self.pending -= 1;
                    self.start_round(r1, fx)?;
                }
                CheckpointerPhase::DrainGreen => {
                    if r1.any_active_started(Color::Green) {
                        return Ok(());
                    }
                    let base = r1.round_base();
                    r1.set_initiator_color(Color::Red)?;
                    fx.trace(color_event(r1));
                    let marker = r1.mark_local_cut(base)?;
                    fx.trace(Event::CpLogAppend {
                        cp: base,
                        log_index: marker,
                        first: true,
                    });
                    fx.trace(Event::Vpolc {
                        cp: base,
                        log_index: marker,
                    });
                    self.marker = Some(marker);
                    self.cp_set = r1.txn_ids_before(marker);
                    self.set_phase(r1, CheckpointerPhase::DrainYellow, fx);
                }
                CheckpointerPhase::DrainYellow => {
                    if r1.any_active_started(Color::Yellow) {
                        return Ok(());
                    }
                    self.set_phase(r1, CheckpointerPhase::Flushing, fx);
                    fx.0.push(Effect::FlushTick);
                    return Ok(());
                }
                CheckpointerPhase::Flushing => return Ok(()),
                CheckpointerPhase::AwaitReplies => {
                    if self.replies.len() + 1 < r1.replica_count() as usize {
                        return Ok(());
                    }
                    self.set_phase(r1, CheckpointerPhase::AwaitCounts, fx);
                    fx.trace(self.counters_event(r1));
                }
                CheckpointerPhase::AwaitCounts => {
                    let slot = r1.round_base().counter_slot();
                    for (&j, &expected) in &self.replies {
                        let got = r1.counts(slot)[j.index()];
                        if got > expected {
                            return Err(violation(
                                r1.id(),
                                format!(
                                    "received {got} messages from {j} but it reported {expected}"
                                ),
                            ));
                        }
                        if got < expected {
                            return Ok(());
                        }
                    }
                    self.finish(r1, fx)?;
                }
            }
        }
    }

    fn counters_event(&self, r1: &ReplicaState) -> Event {
        let base = r1.round_base();
        let slot = base.counter_slot();
        let mut replies = vec![0; r1.replica_count() as usize];
        for (j, c) in &self.replies {
            replies[j.index()] = *c;
        }
        Event::Counters {
            cp: base,
            slot,
            counts: r1.counts(slot).to_vec(),
            replies,
        }
    }

    fn finish(&mut self, r1: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        let base = r1.round_base();
        fx.trace(self.counters_event(r1));
        let marker = self
            .marker
            .ok_or_else(|| violation(r1.id(), "round finished without a cut"))?;
        let checkpoint = Checkpoint {
            cp_num: base,
            state: std::mem::take(&mut self.output),
            cp_set: std::mem::take(&mut self.cp_set),
            vpogc: BTreeMap::from([(r1.id(), marker)]),
        };
        r1.reset_counts(base.counter_slot());
        let before = r1.status_writes();
        r1.finish_round()?;
        fx.trace(Event::PolaritySwap {
            cp: base,
            status_writes_before: before,
            status_writes_after: r1.status_writes(),
        });
        fx.trace(color_event(r1));
        self.completed += 1;
        self.phase = CheckpointerPhase::Done;
        fx.trace(Event::Phase {
            cp: base,
            phase: CheckpointerPhase::Done,
        });
        fx.0.push(Effect::Completed(checkpoint));
        Ok(())
    }

    fn flushed(&self, key: &Key) -> bool {
        match self.phase {
            CheckpointerPhase::Flushing => self.key_pos[key] < self.flush_cursor,
            CheckpointerPhase::AwaitReplies | CheckpointerPhase::AwaitCounts => true,
            _ => false,
        }
    }

    /// Flush the next chunk of keys; after the last one, request cuts from all peers.
    pub fn flush_step(&mut self, r1: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        if self.phase != CheckpointerPhase::Flushing {
            return Err(violation(r1.id(), "flush tick outside the flushing phase"));
        }
        let keys = r1.keys().to_vec();
        let end = (self.flush_cursor + self.flush_chunk).min(keys.len());
        for key in &keys[self.flush_cursor..end] {
            let v = r1.flush_key(key)?;
            self.output.insert(key.clone(), v);
        }
        self.flush_cursor = end;
        if end < keys.len() {
            fx.0.push(Effect::FlushTick);
            return Ok(());
        }
        let base = r1.round_base();
        for j in 1..r1.replica_count() {
            fx.send(ReplicaId(j), MessageBody::CutForCp { cp: base });
        }
        self.set_phase(r1, CheckpointerPhase::AwaitReplies, fx);
        self.poll(r1, fx)
    }

    pub fn on_reply(
        &mut self,
        r1: &mut ReplicaState,
        src: ReplicaId,
        count: u64,
        cp: CpNum,
        fx: &mut Effects,
    ) -> Result<()> {
        let base = r1.round_base();
        if cp < base || !self.phase.is_active() {
            fx.trace(Event::Warning {
                message: format!("ignored stale CutForCpReply({count}, {cp}) from {src}"),
            });
            return Ok(());
        }
        if cp > base || self.phase == CheckpointerPhase::DrainGreen {
            return Err(violation(
                r1.id(),
                format!(
                    "CutForCpReply for round {cp} during round {base} ({:?})",
                    self.phase
                ),
            ));
        }
        if self.replies.contains_key(&src) {
            fx.trace(Event::Warning {
                message: format!("ignored repeated CutForCpReply from {src}"),
            });
            return Ok(());
        }
        self.replies.insert(src, count);
        self.poll(r1, fx)
    }

    /// Apply a transaction that belongs to the checkpoint but reached the
    /// initiator after it turned red.
    pub fn patch(
        &mut self,
        r1: &mut ReplicaState,
        txn: &Transaction,
        fx: &mut Effects,
    ) -> Result<()> {
        let resolver = r1.resolver();
        for w in &txn.write_set {
            if self.flushed(&w.key) {
                let cur = self
                    .output
                    .get_mut(&w.key)
                    .ok_or_else(|| ReplicaError::UnknownKey(w.key.clone()))?;
                *cur = resolver.resolve(*cur, w.versioned())?;
            } else {
                r1.patch_stable(&w.key, w.versioned())?;
            }
        }
        self.cp_set.insert(txn.id);
        fx.trace(Event::CheckpointPatch {
            cp: r1.round_base(),
            txn: txn.id,
            keys: txn.write_set.iter().map(|w| w.key.clone()).collect(),
        });
        Ok(())
    }
}

/// MessageSender position in the commit-log.
#[derive(Debug, Clone, Default)]
pub struct SenderCursor {
    next: usize,
    curr: CpNum,
    last_acted: CpNum,
}

impl SenderCursor {
    pub fn new() -> Self {
        SenderCursor {
            next: 0,
            curr: CpNum::FIRST,
            last_acted: CpNum(0),
        }
    }

    pub fn position(&self) -> usize {
        self.next
    }

    /// True if the entry under the cursor is a local transaction waiting to be sent.
    pub fn at_local(&self, r: &ReplicaState) -> bool {
        matches!(r.log().get(self.next), Some(CommitLogEntry::LocalTxn(_)))
    }

    pub fn caught_up(&self, r: &ReplicaState) -> bool {
        self.next >= r.log().len()
    }

    /// Consume every non-transaction entry under the cursor, stopping at the
    /// next local transaction or the end of the log.
    pub fn process_markers(&mut self, r: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        while let Some(entry) = r.log().get(self.next) {
            match entry {
                CommitLogEntry::LocalTxn(_) => return Ok(()),
                CommitLogEntry::ReplicatedTxn(_) => {}
                CommitLogEntry::CpLog(cp) => {
                    let cp = *cp;
                    if !r.is_initiator() && cp > self.last_acted {
                        r.turn_red(cp)?;
                        fx.trace(color_event(r));
                        self.curr = r.cp();
                        let count = r.take_msg_count();
                        fx.send(
                            ReplicaId::INITIATOR,
                            MessageBody::CutForCpReply { count, cp },
                        );
                        self.last_acted = cp;
                    }
                }
            }
            self.next += 1;
        }
        Ok(())
    }

    /// Broadcast the local transaction under the cursor to every other replica.
    pub fn send_local(&mut self, r: &mut ReplicaState, fx: &mut Effects) -> Result<()> {
        let Some(CommitLogEntry::LocalTxn(txn)) = r.log().get(self.next) else {
            return Err(violation(
                r.id(),
                "sender fired without a local transaction",
            ));
        };
        let mut wire = txn.clone();
        wire.start_color = None;
        wire.end_color = None;
        let cp = if r.is_initiator() {
            if r.repl_color() == Color::Red {
                r.cp()
            } else {
                r.round_base()
            }
        } else {
            if self.curr != r.cp() && !r.cp().is_odd() {
                let round = CpNum(r.cp().0 - 1);
                let a = r.append_cplog(round)?;
                cplog_events(r, round, a, fx);
                self.curr = r.cp();
            }
            r.bump_msg_count();
            self.curr
        };
        for j in 0..r.replica_count() {
            if ReplicaId(j) != r.id() {
                fx.send(
                    ReplicaId(j),
                    MessageBody::Replicate {
                        txn: wire.clone(),
                        cp,
                    },
                );
            }
        }
        self.next += 1;
        Ok(())
    }
}

/// MessageReceiver: handle one delivered message at its destination. The
/// receive itself is traced here so that a cut taken because of the message
/// lands before it.
pub fn receive(
    r: &mut ReplicaState,
    checkpointer: Option<&mut Checkpointer>,
    msg: &Message,
    fx: &mut Effects,
) -> Result<()> {
    let received = |log_index: Option<u64>, duplicate: bool| Event::Receive {
        msg: msg.id,
        src: msg.src,
        channel: msg.channel,
        duplicate,
        log_index,
    };
    // A redelivered copy may be arbitrarily stale; its original already did
    // everything the protocol needs.
    if let MessageBody::Replicate { txn, .. } = &msg.body {
        if r.has_applied(txn.id) {
            fx.trace(received(None, true));
            return Ok(());
        }
    }
    match (&msg.body, r.is_initiator()) {
        (MessageBody::Replicate { txn, cp }, false) => {
            let cp = *cp;
            let own = r.cp();
            let base = if own.is_odd() { own } else { CpNum(own.0 - 1) };
            if cp > base.red() {
                return Err(violation(
                    r.id(),
                    format!(
                        "message from {} carries future cpNum {cp} (at {own})",
                        msg.src
                    ),
                ));
            }
            if own.is_odd() && cp > own {
                let a = r.append_cplog(own)?;
                cplog_events(r, own, a, fx);
            }
            let idx = r.execute_remote(txn)?;
            fx.trace(received(idx, idx.is_none()));
        }
        (MessageBody::Replicate { txn, cp }, true) => {
            let cp = *cp;
            let base = r.round_base();
            if cp < base {
                return Err(violation(
                    r.id(),
                    format!(
                        "late message {} with cpNum {cp} after round {base} finished",
                        txn.id
                    ),
                ));
            }
            let msg_color = color_of(cp, base)?;
            let idx = r.execute_remote(txn)?;
            fx.trace(received(idx, idx.is_none()));
            if idx.is_some() {
                r.count_delivery(msg.src, cp);
                if r.repl_color() == Color::Red && msg_color != Color::Red {
                    let cpr = checkpointer
                        .ok_or_else(|| violation(r.id(), "red initiator without a checkpointer"))?;
                    cpr.patch(r, txn, fx)?;
                }
            }
        }
        (MessageBody::CutForCp { cp }, false) => {
            let cp = *cp;
            let a = r.append_cplog(cp)?;
            cplog_events(r, cp, a, fx);
            fx.trace(received(None, false));
        }
        (MessageBody::CutForCpReply { count, cp }, true) => {
            fx.trace(received(None, false));
            let cpr = checkpointer
                .ok_or_else(|| violation(r.id(), "reply received without a checkpointer"))?;
            cpr.on_reply(r, msg.src, *count, *cp, fx)?;
        }
        (body, _) => {
            return Err(violation(r.id(), format!("unexpected message {body:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelKind, MsgId, ResolverKind, Schema, TxnSpec};
    use crate::replica::BeginOutcome;

    fn schema() -> Schema {
        Schema::with_key_count(3, 0)
    }

    fn replica(i: u16, n: u16) -> ReplicaState {
        ReplicaState::new(ReplicaId(i), n, &schema(), ResolverKind::Lww)
    }

    fn commit(r: &mut ReplicaState, key: usize, value: i64) -> Transaction {
        let spec = TxnSpec {
            reads: vec![],
            writes: vec![(schema().keys[key].clone(), value)],
        };
        let BeginOutcome::Acquired(id) = r.begin_local(spec).unwrap() else {
            panic!("lock conflict in test");
        };
        r.commit_local(id).unwrap().txn
    }

    fn sent(fx: &Effects) -> Vec<(ReplicaId, MessageBody)> {
        fx.0.iter()
            .filter_map(|e| match e {
                Effect::Send { dst, body } => Some((*dst, body.clone())),
                _ => None,
            })
            .collect()
    }

    fn msg(src: u16, dst: u16, body: MessageBody) -> Message {
        Message {
            id: MsgId(0),
            src: ReplicaId(src),
            dst: ReplicaId(dst),
            channel: body.channel(),
            body,
        }
    }

    fn drive_flush(cpr: &mut Checkpointer, r1: &mut ReplicaState, fx: &mut Effects) {
        while cpr.phase() == CheckpointerPhase::Flushing {
            cpr.flush_step(r1, fx).unwrap();
        }
    }

    #[test]
    fn two_replica_round_terminates_on_counter_match() {
        let mut r1 = replica(0, 2);
        let mut r2 = replica(1, 2);
        let mut sender = SenderCursor::new();
        let mut cpr = Checkpointer::new(8);
        let mut fx = Effects::default();

        let mut green = Vec::new();
        for v in 1..=3 {
            commit(&mut r2, 0, v);
            sender.send_local(&mut r2, &mut fx).unwrap();
            green.extend(sent(&fx));
            fx.0.clear();
        }
        assert_eq!(r2.msg_count(), 3);
        cpr.trigger(&mut r1, &mut fx).unwrap();
        assert_eq!(cpr.phase(), CheckpointerPhase::Flushing);
        drive_flush(&mut cpr, &mut r1, &mut fx);
        let cut = sent(&fx);
        assert_eq!(
            cut,
            vec![(ReplicaId(1), MessageBody::CutForCp { cp: CpNum(1) })]
        );
        fx.0.clear();

        receive(&mut r2, None, &msg(0, 1, cut[0].1.clone()), &mut fx).unwrap();
        sender.process_markers(&mut r2, &mut fx).unwrap();
        let reply = sent(&fx);
        assert_eq!(
            reply,
            vec![(
                ReplicaId(0),
                MessageBody::CutForCpReply {
                    count: 3,
                    cp: CpNum(1)
                }
            )]
        );
        fx.0.clear();
        receive(
            &mut r1,
            Some(&mut cpr),
            &msg(1, 0, reply[0].1.clone()),
            &mut fx,
        )
        .unwrap();
        assert_eq!(cpr.phase(), CheckpointerPhase::AwaitCounts);
        for (_, body) in green {
            receive(&mut r1, Some(&mut cpr), &msg(1, 0, body), &mut fx).unwrap();
            cpr.poll(&mut r1, &mut fx).unwrap();
        }
        assert_eq!(cpr.phase(), CheckpointerPhase::Done);
        let done: Vec<_> =
            fx.0.iter()
                .filter_map(|e| match e {
                    Effect::Completed(c) => Some(c.clone()),
                    _ => None,
                })
                .collect();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].cp_set.len(), 3);
        assert_eq!(done[0].state[&schema().keys[0]].value, 3);
        assert_eq!(r1.round_base(), CpNum(3));
        assert_eq!(r1.counts(0), &[0, 0]);
    }

    #[test]
    fn duplicate_cplogs_yield_one_reply() {
        let mut r2 = replica(1, 2);
        let mut sender = SenderCursor::new();
        let mut fx = Effects::default();
        for _ in 0..3 {
            r2.append_cplog(CpNum(1)).unwrap();
        }
        sender.process_markers(&mut r2, &mut fx).unwrap();
        assert_eq!(sent(&fx).len(), 1);
        assert_eq!(r2.repl_color(), Color::Red);
    }

    #[test]
    fn yellow_send_is_counted_and_logged() {
        let mut r2 = replica(1, 3);
        let mut sender = SenderCursor::new();
        let mut fx = Effects::default();
        commit(&mut r2, 0, 1);
        sender.send_local(&mut r2, &mut fx).unwrap();
        commit(&mut r2, 1, 1);
        // learns of the checkpoint before sending the second transaction
        r2.append_cplog(CpNum(1)).unwrap();
        fx.0.clear();
        sender.send_local(&mut r2, &mut fx).unwrap();
        let cps: Vec<CpNum> = sent(&fx)
            .into_iter()
            .map(|(_, b)| match b {
                MessageBody::Replicate { cp, .. } => cp,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(cps, vec![CpNum(2), CpNum(2)]);
        assert_eq!(r2.msg_count(), 2);
        // the sender appended its own duplicate marker
        let markers = r2
            .log()
            .iter()
            .filter(|e| matches!(e, CommitLogEntry::CpLog(_)))
            .count();
        assert_eq!(markers, 2);
    }

    #[test]
    fn initiator_never_sends_yellow() {
        let mut r1 = replica(0, 2);
        let mut cpr = Checkpointer::new(8);
        let mut sender = SenderCursor::new();
        let mut fx = Effects::default();
        let spec = TxnSpec {
            reads: vec![],
            writes: vec![(schema().keys[0].clone(), 5)],
        };
        let BeginOutcome::Acquired(id) = r1.begin_local(spec).unwrap() else {
            unreachable!()
        };
        cpr.trigger(&mut r1, &mut fx).unwrap();
        assert_eq!(r1.repl_color(), Color::Yellow);
        r1.commit_local(id).unwrap();
        fx.0.clear();
        sender.send_local(&mut r1, &mut fx).unwrap();
        assert_eq!(
            sent(&fx)[0].1,
            MessageBody::Replicate {
                txn: Transaction {
                    start_color: None,
                    end_color: None,
                    ..r1.log()[0].local_txn().unwrap().clone()
                },
                cp: CpNum(1)
            }
        );
        cpr.poll(&mut r1, &mut fx).unwrap();
        assert_eq!(r1.repl_color(), Color::Red);
    }

    #[test]
    fn committed_green_sent_red_after_switch() {
        let mut r1 = replica(0, 2);
        let mut cpr = Checkpointer::new(8);
        let mut sender = SenderCursor::new();
        let mut fx = Effects::default();
        commit(&mut r1, 1, 4);
        cpr.trigger(&mut r1, &mut fx).unwrap();
        fx.0.clear();
        sender.send_local(&mut r1, &mut fx).unwrap();
        assert!(matches!(
            sent(&fx)[0].1,
            MessageBody::Replicate { cp: CpNum(3), .. }
        ));
    }

    #[test]
    fn green_message_while_red_patches_checkpoint() {
        let mut r1 = replica(0, 2);
        let mut r2 = replica(1, 2);
        let mut cpr = Checkpointer::new(1);
        let mut fx = Effects::default();
        let t = commit(&mut r2, 2, 9);
        cpr.trigger(&mut r1, &mut fx).unwrap();
        // first chunk flushes k00 only; k02 is still pending
        cpr.flush_step(&mut r1, &mut fx).unwrap();
        let m = msg(
            1,
            0,
            MessageBody::Replicate {
                txn: t.clone(),
                cp: CpNum(1),
            },
        );
        receive(&mut r1, Some(&mut cpr), &m, &mut fx).unwrap();
        assert!(r1.is_available(&schema().keys[2]));
        drive_flush(&mut cpr, &mut r1, &mut fx);
        receive(
            &mut r1,
            Some(&mut cpr),
            &msg(
                1,
                0,
                MessageBody::CutForCpReply {
                    count: 1,
                    cp: CpNum(1),
                },
            ),
            &mut fx,
        )
        .unwrap();
        let cp =
            fx.0.iter()
                .find_map(|e| match e {
                    Effect::Completed(c) => Some(c.clone()),
                    _ => None,
                })
                .expect("round completes");
        assert!(cp.cp_set.contains(&t.id));
        assert_eq!(cp.state[&schema().keys[2]].value, 9);
    }

    #[test]
    fn stale_redelivery_after_round_end_is_dropped() {
        let mut r1 = replica(0, 2);
        let mut r2 = replica(1, 2);
        let mut cpr = Checkpointer::new(8);
        let mut fx = Effects::default();
        let t = commit(&mut r2, 1, 4);
        let m = msg(
            1,
            0,
            MessageBody::Replicate {
                txn: t,
                cp: CpNum(1),
            },
        );
        receive(&mut r1, Some(&mut cpr), &m, &mut fx).unwrap();
        cpr.trigger(&mut r1, &mut fx).unwrap();
        drive_flush(&mut cpr, &mut r1, &mut fx);
        receive(
            &mut r1,
            Some(&mut cpr),
            &msg(
                1,
                0,
                MessageBody::CutForCpReply {
                    count: 1,
                    cp: CpNum(1),
                },
            ),
            &mut fx,
        )
        .unwrap();
        assert_eq!(r1.round_base(), CpNum(3));
        let counts = [r1.counts(0).to_vec(), r1.counts(1).to_vec()];
        let mut fx = Effects::default();
        receive(&mut r1, Some(&mut cpr), &m, &mut fx).unwrap();
        assert!(matches!(
            fx.0.last(),
            Some(Effect::Trace(Event::Receive {
                duplicate: true,
                log_index: None,
                ..
            }))
        ));
        assert_eq!([r1.counts(0).to_vec(), r1.counts(1).to_vec()], counts);
    }

    #[test]
    fn red_message_is_excluded_and_counted_for_next_round() {
        let mut r1 = replica(0, 2);
        let mut r2 = replica(1, 2);
        let mut cpr = Checkpointer::new(8);
        let mut fx = Effects::default();
        cpr.trigger(&mut r1, &mut fx).unwrap();
        r2.append_cplog(CpNum(1)).unwrap();
        r2.turn_red(CpNum(1)).unwrap();
        let t = commit(&mut r2, 0, 7);
        let m = msg(
            1,
            0,
            MessageBody::Replicate {
                txn: t,
                cp: CpNum(3),
            },
        );
        receive(&mut r1, Some(&mut cpr), &m, &mut fx).unwrap();
        assert_eq!(r1.counts(1)[1], 1);
        assert_eq!(r1.counts(0)[1], 0);
        drive_flush(&mut cpr, &mut r1, &mut fx);
        receive(
            &mut r1,
            Some(&mut cpr),
            &msg(
                1,
                0,
                MessageBody::CutForCpReply {
                    count: 0,
                    cp: CpNum(1),
                },
            ),
            &mut fx,
        )
        .unwrap();
        let cp =
            fx.0.iter()
                .find_map(|e| match e {
                    Effect::Completed(c) => Some(c.clone()),
                    _ => None,
                })
                .unwrap();
        assert!(cp.cp_set.is_empty());
        assert_eq!(cp.state[&schema().keys[0]].value, 0);
    }

    #[test]
    fn indirect_learning_cuts_before_receive() {
        let mut r3 = replica(2, 3);
        let mut r2 = replica(1, 3);
        let t = commit(&mut r2, 0, 1);
        let mut fx = Effects::default();
        let m = Message {
            id: MsgId(7),
            src: ReplicaId(1),
            dst: ReplicaId(2),
            channel: ChannelKind::Replication,
            body: MessageBody::Replicate {
                txn: t,
                cp: CpNum(2),
            },
        };
        receive(&mut r3, None, &m, &mut fx).unwrap();
        let kinds: Vec<&str> =
            fx.0.iter()
                .filter_map(|e| match e {
                    Effect::Trace(Event::CpLogAppend { .. }) => Some("cplog"),
                    Effect::Trace(Event::Receive { .. }) => Some("receive"),
                    _ => None,
                })
                .collect();
        assert_eq!(kinds, vec!["cplog", "receive"]);
        assert_eq!(r3.first_cplog(CpNum(1)), Some(0));
    }

    #[test]
    fn future_round_message_is_rejected() {
        let mut r2 = replica(1, 3);
        let t = commit(&mut replica(2, 3), 0, 1);
        let mut fx = Effects::default();
        let m = msg(
            2,
            1,
            MessageBody::Replicate {
                txn: t,
                cp: CpNum(4),
            },
        );
        assert!(receive(&mut r2, None, &m, &mut fx).is_err());
    }

    #[test]
    fn stale_reply_is_ignored() {
        let mut r1 = replica(0, 2);
        let mut cpr = Checkpointer::new(8);
        let mut fx = Effects::default();
        cpr.on_reply(&mut r1, ReplicaId(1), 0, CpNum(1), &mut fx)
            .unwrap();
        assert!(matches!(fx.0[0], Effect::Trace(Event::Warning { .. })));
    }
}
