//! Deterministic discrete-event simulation of the replica group.
//!
//! Virtual time is an integer tick. Every source of randomness (workload,
//! each replica's sender, each channel) has its own seeded ChaCha stream,
//! so control traffic can never perturb replication timing.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ChannelKind, Checkpoint, CommitLogEntry, Key, Message, MessageBody, MsgId, ReplicaId,
    ResolverKind, Schema, TxnId, TxnSpec, Value, Versioned,
};
use crate::protocol::{receive, Checkpointer, CheckpointerPhase, Effect, Effects, SenderCursor};
use crate::replica::{BeginOutcome, ReplicaError, ReplicaState};
use crate::trace::{Event, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ReplicaError),
    #[error("liveness failure after {events} events at t={time}: {detail}")]
    Liveness {
        events: u64,
        time: u64,
        detail: String,
    },
    #[error("schedule error: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Fifo,
    #[default]
    Reorder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Separate,
    /// One link per ordered pair carries both message classes.
    Shared,
}

/// `base + min(Geometric(mean_extra), max_extra)` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    pub base: u64,
    pub mean_extra: f64,
    pub max_extra: u64,
}

impl DelayConfig {
    pub const fn fixed(ticks: u64) -> Self {
        DelayConfig {
            base: ticks,
            mean_extra: 0.0,
            max_extra: 0,
        }
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        if !(self.mean_extra >= 0.0 && self.mean_extra.is_finite()) {
            return Err(SimError::Config(format!("{what}.mean_extra must be >= 0")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.mean_extra == 0.0 || self.max_extra == 0 {
            return self.base;
        }
        let p = 1.0 / (1.0 + self.mean_extra);
        let g = Geometric::new(p).expect("p is in (0, 1]");
        self.base + g.sample(rng).min(self.max_extra)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default = "default_replication_delay")]
    pub replication: DelayConfig,
    #[serde(default = "default_control_delay")]
    pub control: DelayConfig,
    /// Multiplier applied to every control-message delay.
    #[serde(default = "one")]
    pub control_scale: u64,
    /// Probability that a replicate message is delivered twice.
    #[serde(default)]
    pub dup_prob: f64,
}

fn default_replication_delay() -> DelayConfig {
    DelayConfig {
        base: 1,
        mean_extra: 4.0,
        max_extra: 40,
    }
}

fn default_control_delay() -> DelayConfig {
    DelayConfig {
        base: 1,
        mean_extra: 2.0,
        max_extra: 20,
    }
}

fn default_sender_delay() -> DelayConfig {
    DelayConfig {
        base: 0,
        mean_extra: 1.0,
        max_extra: 8,
    }
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

fn default_flush_chunk() -> usize {
    4
}

fn default_max_events() -> u64 {
    2_000_000
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            policy: Policy::default(),
            layout: Layout::default(),
            replication: default_replication_delay(),
            control: default_control_delay(),
            control_scale: 1,
            dup_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWorkload {
    /// Total transactions, spread uniformly over replicas.
    pub txns: u32,
    /// Arrival times are uniform in `[0, span]`.
    pub span: u64,
    pub exec_ticks: [u64; 2],
    pub writes: [usize; 2],
    #[serde(default)]
    pub reads: [usize; 2],
    #[serde(default = "default_max_value")]
    pub max_value: Value,
}

fn default_max_value() -> Value {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTxn {
    pub replica: u16,
    pub at: u64,
    #[serde(default = "one")]
    pub exec_ticks: u64,
    #[serde(default)]
    pub reads: Vec<Key>,
    pub writes: Vec<(Key, Value)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Random(RandomWorkload),
    Scripted(Vec<ScriptedTxn>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    At(u64),
    /// Fires when this many local commits have happened across all replicas.
    AfterCommits(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Replicate,
    CutForCp,
    CutForCpReply,
}

impl MsgKind {
    fn of(body: &MessageBody) -> MsgKind {
        match body {
            MessageBody::Replicate { .. } => MsgKind::Replicate,
            MessageBody::CutForCp { .. } => MsgKind::CutForCp,
            MessageBody::CutForCpReply { .. } => MsgKind::CutForCpReply,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsgMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<MsgKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<TxnId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<u16>,
}

impl MsgMatch {
    fn matches(&self, src: ReplicaId, dst: ReplicaId, body: &MessageBody) -> bool {
        self.kind.is_none_or(|k| k == MsgKind::of(body))
            && self.src.is_none_or(|s| s == src.0)
            && self.dst.is_none_or(|d| d == dst.0)
            && self.txn.is_none_or(|t| match body {
                MessageBody::Replicate { txn, .. } => txn.id == t,
                _ => false,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleAction {
    DeliverAt(u64),
    ExtraDelay(u64),
    /// Deliver a second copy one tick after the first.
    Duplicate,
    /// Never deliver. Always rejected: channels guarantee eventual delivery.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRule {
    #[serde(rename = "match")]
    pub matcher: MsgMatch,
    pub action: ScheduleAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub replicas: u16,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resolver: ResolverKind,
    pub keys: usize,
    #[serde(default)]
    pub initial_value: Value,
    pub workload: Workload,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
    #[serde(default = "yes")]
    pub checkpointing: bool,
    #[serde(default)]
    pub channels: ChannelConfig,
    #[serde(default = "default_sender_delay")]
    pub sender: DelayConfig,
    #[serde(default = "default_flush_chunk")]
    pub flush_chunk: usize,
    #[serde(default)]
    pub schedule: Vec<ScheduleRule>,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

impl SimConfig {
    pub fn schema(&self) -> Schema {
        Schema::with_key_count(self.keys, self.initial_value)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.replicas < 2 {
            return bad(format!("replicas must be >= 2, got {}", self.replicas));
        }
        if self.keys == 0 {
            return bad("keys must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.channels.dup_prob) {
            return bad(format!(
                "dup_prob {} is not a probability",
                self.channels.dup_prob
            ));
        }
        if self.channels.control_scale == 0 {
            return bad("control_scale must be >= 1".into());
        }
        self.channels.replication.validate("channels.replication")?;
        self.channels.control.validate("channels.control")?;
        self.sender.validate("sender")?;
        if self.channels.replication.base == 0 || self.channels.control.base == 0 {
            return bad("channel delays need base >= 1".into());
        }
        let schema = self.schema();
        match &self.workload {
            Workload::Random(w) => {
                if w.exec_ticks[0] > w.exec_ticks[1]
                    || w.writes[0] > w.writes[1]
                    || w.reads[0] > w.reads[1]
                {
                    return bad("workload ranges must be [low, high]".into());
                }
                if w.writes[1] > self.keys || w.reads[1] > self.keys {
                    return bad("workload touches more keys than exist".into());
                }
                if w.writes[0] + w.reads[0] == 0 {
                    return bad("workload transactions must touch a key".into());
                }
                if w.max_value < 1 {
                    return bad("max_value must be >= 1".into());
                }
            }
            Workload::Scripted(txns) => {
                for (i, t) in txns.iter().enumerate() {
                    if t.replica >= self.replicas {
                        return bad(format!("workload[{i}]: no replica {}", t.replica));
                    }
                    let touched = t.reads.iter().chain(t.writes.iter().map(|(k, _)| k));
                    for k in touched {
                        if !schema.keys.contains(k) {
                            return bad(format!("workload[{i}]: unknown key {k}"));
                        }
                    }
                    if t.reads.is_empty() && t.writes.is_empty() {
                        return bad(format!("workload[{i}]: transaction touches no keys"));
                    }
                }
            }
        }
        if !self.checkpointing && !self.triggers.is_empty() {
            return bad("triggers given but checkpointing is disabled".into());
        }
        for (i, r) in self.schedule.iter().enumerate() {
            if r.action == ScheduleAction::Hold {
                return Err(SimError::Schedule(format!(
                    "schedule[{i}] holds a message forever, violating eventual delivery"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedCheckpoint {
    pub checkpoint: Checkpoint,
    pub started_at: u64,
    pub completed_at: u64,
}

/// One commit-log entry together with the tick at which it was appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEntry {
    pub index: u64,
    pub time: u64,
    pub entry: CommitLogEntry,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub config: SimConfig,
    pub schema: Schema,
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<CompletedCheckpoint>,
    pub final_states: Vec<BTreeMap<Key, Versioned>>,
    pub logs: Vec<Vec<TimedEntry>>,
    pub end_time: u64,
    pub events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey {
    time: u64,
    rank: u8,
    a: u64,
    b: u64,
    c: u64,
}

#[derive(Debug, Clone)]
enum SimEvent {
    Trigger,
    Begin {
        replica: usize,
        spec: TxnSpec,
        exec: u64,
    },
    Commit {
        replica: usize,
        txn: TxnId,
    },
    SenderFire {
        replica: usize,
    },
    Deliver {
        msg: Message,
    },
    FlushTick,
}

struct Planned {
    replica: usize,
    at: u64,
    exec: u64,
    spec: TxnSpec,
}

fn stream(kind: u64, a: u64, b: u64) -> u64 {
    (kind << 40) | (a << 20) | b
}

fn rng_for(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn plan_workload(config: &SimConfig, schema: &Schema) -> Vec<Planned> {
    match &config.workload {
        Workload::Scripted(txns) => txns
            .iter()
            .map(|t| Planned {
                replica: t.replica as usize,
                at: t.at,
                exec: t.exec_ticks,
                spec: TxnSpec {
                    reads: t.reads.clone(),
                    writes: t.writes.clone(),
                },
            })
            .collect(),
        Workload::Random(w) => {
            let mut rng = rng_for(config.seed, stream(1, 0, 0));
            let nkeys = schema.keys.len();
            (0..w.txns)
                .map(|_| {
                    let replica = rng.random_range(0..config.replicas) as usize;
                    let at = rng.random_range(0..=w.span);
                    let exec = rng.random_range(w.exec_ticks[0]..=w.exec_ticks[1]);
                    let nw = rng.random_range(w.writes[0]..=w.writes[1]);
                    let nr = rng.random_range(w.reads[0]..=w.reads[1]).min(nkeys - nw);
                    let picked = sample(&mut rng, nkeys, nw + nr).into_vec();
                    let writes = picked[..nw]
                        .iter()
                        .map(|&i| (schema.keys[i].clone(), rng.random_range(1..=w.max_value)))
                        .collect();
                    let reads = picked[nw..]
                        .iter()
                        .map(|&i| schema.keys[i].clone())
                        .collect();
                    Planned {
                        replica,
                        at,
                        exec,
                        spec: TxnSpec { reads, writes },
                    }
                })
                .collect()
        }
    }
}

struct SenderState {
    cursor: SenderCursor,
    armed: bool,
    rng: ChaCha8Rng,
}

struct Sim {
    config: SimConfig,
    schema: Schema,
    now: u64,
    queue: BTreeMap<EventKey, SimEvent>,
    replicas: Vec<ReplicaState>,
    senders: Vec<SenderState>,
    checkpointer: Checkpointer,
    trace: Vec<TraceRecord>,
    log_times: Vec<Vec<u64>>,
    exec_ticks: BTreeMap<TxnId, u64>,
    commits: u64,
    commit_triggers: Vec<u64>,
    next_msg: u64,
    channel_rng: BTreeMap<(u16, u16, ChannelKind), ChaCha8Rng>,
    channel_seq: BTreeMap<(u16, u16, ChannelKind), u64>,
    fifo_last: BTreeMap<(u16, u16, Option<ChannelKind>), u64>,
    rule_hits: Vec<u64>,
    flush_ticks: u64,
    round_starts: VecDeque<u64>,
    checkpoints: Vec<CompletedCheckpoint>,
    events: u64,
}

impl Sim {
    fn new(config: SimConfig) -> Self {
        let schema = config.schema();
        let n = config.replicas;
        let replicas: Vec<ReplicaState> = (0..n)
            .map(|i| ReplicaState::new(ReplicaId(i), n, &schema, config.resolver))
            .collect();
        let senders = (0..n)
            .map(|i| SenderState {
                cursor: SenderCursor::new(),
                armed: false,
                rng: rng_for(config.seed, stream(2, i as u64, 0)),
            })
            .collect();
        let rule_hits = vec![0; config.schedule.len()];
        Sim {
            checkpointer: Checkpointer::new(config.flush_chunk),
            schema,
            now: 0,
            queue: BTreeMap::new(),
            replicas,
            senders,
            trace: Vec::new(),
            log_times: vec![Vec::new(); n as usize],
            exec_ticks: BTreeMap::new(),
            commits: 0,
            commit_triggers: Vec::new(),
            next_msg: 0,
            channel_rng: BTreeMap::new(),
            channel_seq: BTreeMap::new(),
            fifo_last: BTreeMap::new(),
            rule_hits,
            flush_ticks: 0,
            round_starts: VecDeque::new(),
            checkpoints: Vec::new(),
            events: 0,
            config,
        }
    }

    fn push(&mut self, key: EventKey, ev: SimEvent) {
        let prev = self.queue.insert(key, ev);
        debug_assert!(prev.is_none(), "event keys are unique");
    }

    fn record(&mut self, replica: ReplicaId, event: Event) {
        if let Event::Phase {
            phase: CheckpointerPhase::DrainGreen,
            ..
        } = event
        {
            self.round_starts.push_back(self.now);
        }
        self.trace.push(TraceRecord {
            seq: self.trace.len() as u64,
            time: self.now,
            replica,
            event,
        });
    }

    fn liveness(&self, detail: String) -> SimError {
        SimError::Liveness {
            events: self.events,
            time: self.now,
            detail,
        }
    }

    fn run(mut self) -> Result<SimOutcome, SimError> {
        self.config.validate()?;
        let plan = plan_workload(&self.config, &self.schema);
        self.record(
            ReplicaId::INITIATOR,
            Event::RunStart {
                replicas: self.config.replicas,
                keys: self.schema.keys.clone(),
                initial_value: self.schema.initial_value,
                resolver: self.config.resolver,
                checkpointing: self.config.checkpointing,
            },
        );
        for (i, p) in plan.into_iter().enumerate() {
            let key = EventKey {
                time: p.at,
                rank: 2,
                a: p.replica as u64,
                b: i as u64,
                c: 0,
            };
            self.push(
                key,
                SimEvent::Begin {
                    replica: p.replica,
                    spec: p.spec,
                    exec: p.exec,
                },
            );
        }
        for (i, t) in self.config.triggers.clone().into_iter().enumerate() {
            match t {
                Trigger::At(time) => self.push(
                    EventKey {
                        time,
                        rank: 0,
                        a: i as u64,
                        b: 0,
                        c: 0,
                    },
                    SimEvent::Trigger,
                ),
                Trigger::AfterCommits(k) => self.commit_triggers.push(k),
            }
        }
        self.commit_triggers.sort_unstable();

        while let Some((key, ev)) = self.queue.pop_first() {
            self.events += 1;
            if self.events > self.config.max_events {
                let detail = format!(
                    "event budget exhausted; checkpointer {:?}, {} queued events",
                    self.checkpointer.phase(),
                    self.queue.len()
                );
                return Err(self.liveness(detail));
            }
            self.now = key.time;
            self.step(ev)?;
        }
        self.finish()
    }

    fn step(&mut self, ev: SimEvent) -> Result<(), SimError> {
        let mut fx = Effects::default();
        let replica = match ev {
            SimEvent::Trigger => {
                self.checkpointer.trigger(&mut self.replicas[0], &mut fx)?;
                0
            }
            SimEvent::Begin {
                replica,
                spec,
                exec,
            } => {
                self.begin(replica, spec, exec)?;
                replica
            }
            SimEvent::Commit { replica, txn } => {
                self.commit(replica, txn)?;
                replica
            }
            SimEvent::SenderFire { replica } => {
                let s = &mut self.senders[replica];
                s.armed = false;
                s.cursor.send_local(&mut self.replicas[replica], &mut fx)?;
                replica
            }
            SimEvent::Deliver { msg } => {
                let dst = msg.dst.index();
                let cpr = (dst == 0).then_some(&mut self.checkpointer);
                receive(&mut self.replicas[dst], cpr, &msg, &mut fx)?;
                dst
            }
            SimEvent::FlushTick => {
                self.checkpointer
                    .flush_step(&mut self.replicas[0], &mut fx)?;
                0
            }
        };
        self.apply(replica, &mut fx)?;
        self.settle(replica)
    }

    /// Post-event housekeeping: log times, the sender, the checkpointer.
    fn settle(&mut self, replica: usize) -> Result<(), SimError> {
        loop {
            let mut fx = Effects::default();
            let r = &mut self.replicas[replica];
            let s = &mut self.senders[replica];
            s.cursor.process_markers(r, &mut fx)?;
            if replica == 0 && self.config.checkpointing {
                self.checkpointer.poll(&mut self.replicas[0], &mut fx)?;
            }
            if fx.is_empty() {
                break;
            }
            self.apply(replica, &mut fx)?;
        }
        let times = &mut self.log_times[replica];
        while times.len() < self.replicas[replica].log().len() {
            times.push(self.now);
        }
        let s = &mut self.senders[replica];
        if !s.armed && s.cursor.at_local(&self.replicas[replica]) {
            s.armed = true;
            let at = self.now + self.config.sender.draw(&mut s.rng);
            let key = EventKey {
                time: at,
                rank: 4,
                a: replica as u64,
                b: s.cursor.position() as u64,
                c: 0,
            };
            self.push(key, SimEvent::SenderFire { replica });
        }
        Ok(())
    }

    fn begin(&mut self, replica: usize, spec: TxnSpec, exec: u64) -> Result<(), SimError> {
        let id = ReplicaId(replica as u16);
        let r = &mut self.replicas[replica];
        let start_cp = r.is_initiator().then(|| r.cp());
        let outcome = r.begin_local(spec)?;
        let txn = match &outcome {
            BeginOutcome::Acquired(t) | BeginOutcome::Blocked { txn: t, .. } => *t,
        };
        self.exec_ticks.insert(txn, exec);
        self.record(
            id,
            Event::TxnBegin {
                txn,
                exec_ticks: exec,
                start_cp,
            },
        );
        match outcome {
            BeginOutcome::Acquired(txn) => self.acquired(replica, txn),
            BeginOutcome::Blocked { txn, blocked_by } => {
                self.record(id, Event::LockWait { txn, blocked_by })
            }
        }
        Ok(())
    }

    fn acquired(&mut self, replica: usize, txn: TxnId) {
        self.record(ReplicaId(replica as u16), Event::LockAcquired { txn });
        let key = EventKey {
            time: self.now + self.exec_ticks[&txn],
            rank: 3,
            a: replica as u64,
            b: txn.seq as u64,
            c: 0,
        };
        self.push(key, SimEvent::Commit { replica, txn });
    }

    fn commit(&mut self, replica: usize, txn: TxnId) -> Result<(), SimError> {
        let out = self.replicas[replica].commit_local(txn)?;
        self.record(
            ReplicaId(replica as u16),
            Event::Commit {
                txn: out.txn,
                log_index: out.log_index,
            },
        );
        for g in out.granted {
            self.acquired(replica, g);
        }
        self.commits += 1;
        while self.commit_triggers.first() == Some(&self.commits) {
            self.commit_triggers.remove(0);
            self.settle(replica)?;
            let mut fx = Effects::default();
            self.checkpointer.trigger(&mut self.replicas[0], &mut fx)?;
            self.apply(0, &mut fx)?;
            self.settle(0)?;
        }
        Ok(())
    }

    fn apply(&mut self, replica: usize, fx: &mut Effects) -> Result<(), SimError> {
        let src = ReplicaId(replica as u16);
        let effects: Vec<Effect> = fx.drain().collect();
        for effect in effects {
            match effect {
                Effect::Trace(e) => self.record(src, e),
                Effect::Send { dst, body } => self.send(src, dst, body)?,
                Effect::FlushTick => {
                    self.flush_ticks += 1;
                    let key = EventKey {
                        time: self.now + 1,
                        rank: 6,
                        a: self.flush_ticks,
                        b: 0,
                        c: 0,
                    };
                    self.push(key, SimEvent::FlushTick);
                }
                Effect::Completed(cp) => self.completed(cp)?,
            }
        }
        Ok(())
    }

    fn completed(&mut self, mut cp: Checkpoint) -> Result<(), SimError> {
        for r in &self.replicas[1..] {
            let idx = r.first_cplog(cp.cp_num).ok_or_else(|| {
                SimError::Protocol(ReplicaError::Protocol {
                    replica: r.id(),
                    detail: format!("round {} finished before this replica cut", cp.cp_num),
                })
            })?;
            cp.vpogc.insert(r.id(), idx);
        }
        self.record(
            ReplicaId::INITIATOR,
            Event::CheckpointDone {
                cp: cp.cp_num,
                vpogc: cp.vpogc.values().copied().collect(),
                cp_set_size: cp.cp_set.len(),
            },
        );
        let started_at = self.round_starts.pop_front().unwrap_or(self.now);
        self.checkpoints.push(CompletedCheckpoint {
            checkpoint: cp,
            started_at,
            completed_at: self.now,
        });
        Ok(())
    }

    fn send(&mut self, src: ReplicaId, dst: ReplicaId, body: MessageBody) -> Result<(), SimError> {
        let channel = body.channel();
        let id = MsgId(self.next_msg);
        self.next_msg += 1;
        let ckey = (src.0, dst.0, channel);
        let seed = self.config.seed;
        let rng = self.channel_rng.entry(ckey).or_insert_with(|| {
            let kind = match channel {
                ChannelKind::Replication => 3,
                ChannelKind::Control => 4,
            };
            rng_for(seed, stream(kind, src.0 as u64, dst.0 as u64))
        });
        let chan = &self.config.channels;
        let (mut delay, dup_delay) = match channel {
            ChannelKind::Replication => {
                let d = chan.replication.draw(rng);
                let dup = (chan.dup_prob > 0.0 && rng.random_bool(chan.dup_prob))
                    .then(|| chan.replication.draw(rng));
                (d, dup)
            }
            ChannelKind::Control => (chan.control.draw(rng) * chan.control_scale, None),
        };
        delay = delay.max(1);
        let mut first = self.now + delay;
        let mut copies: Vec<u64> = Vec::new();
        if let Some(i) = self
            .config
            .schedule
            .iter()
            .position(|r| r.matcher.matches(src, dst, &body))
        {
            self.rule_hits[i] += 1;
            match self.config.schedule[i].action {
                ScheduleAction::DeliverAt(t) => {
                    if t <= self.now {
                        return Err(SimError::Schedule(format!(
                            "schedule[{i}] delivers at {t}, not after the send at {}",
                            self.now
                        )));
                    }
                    first = t;
                }
                ScheduleAction::ExtraDelay(d) => first += d,
                ScheduleAction::Duplicate => copies.push(first + 1),
                ScheduleAction::Hold => unreachable!("rejected by validation"),
            }
        }
        copies.insert(0, first);
        if let Some(d) = dup_delay {
            copies.push(self.now + d.max(1));
        }
        self.record(
            src,
            Event::Send {
                msg: id,
                dst,
                channel,
                body: body.clone(),
            },
        );
        let seq = self.channel_seq.entry(ckey).or_insert(0);
        let base_seq = *seq;
        *seq += 1;
        let msg = Message {
            id,
            src,
            dst,
            channel,
            body,
        };
        for (copy, at) in copies.into_iter().enumerate() {
            let at = self.fifo_adjust(src, dst, channel, at);
            let rank = match channel {
                ChannelKind::Replication => 1,
                ChannelKind::Control => 5,
            };
            let key = EventKey {
                time: at,
                rank,
                a: dst.0 as u64,
                b: src.0 as u64,
                c: base_seq * 4 + copy as u64,
            };
            self.push(key, SimEvent::Deliver { msg: msg.clone() });
        }
        Ok(())
    }

    fn fifo_adjust(
        &mut self,
        src: ReplicaId,
        dst: ReplicaId,
        channel: ChannelKind,
        at: u64,
    ) -> u64 {
        if self.config.channels.policy != Policy::Fifo {
            return at;
        }
        let shared = self.config.channels.layout == Layout::Shared;
        let own = (src.0, dst.0, Some(channel));
        let link = (src.0, dst.0, None);
        let mut t = at.max(self.fifo_last.get(&own).copied().unwrap_or(0));
        if shared && channel == ChannelKind::Control {
            t = t.max(self.fifo_last.get(&link).copied().unwrap_or(0));
        }
        self.fifo_last.insert(own, t);
        let l = self.fifo_last.entry(link).or_insert(0);
        *l = (*l).max(t);
        t
    }

    fn finish(self) -> Result<SimOutcome, SimError> {
        if self.checkpointer.phase().is_active() || self.checkpointer.pending() > 0 {
            return Err(self.liveness(format!(
                "queue drained with checkpointer in {:?} ({} pending)",
                self.checkpointer.phase(),
                self.checkpointer.pending()
            )));
        }
        if !self.commit_triggers.is_empty() {
            return Err(self.liveness(format!(
                "commit-count triggers {:?} never reached ({} commits)",
                self.commit_triggers, self.commits
            )));
        }
        for (r, s) in self.replicas.iter().zip(&self.senders) {
            if r.active_count() > 0 || !s.cursor.caught_up(r) {
                return Err(self.liveness(format!("{} did not quiesce", r.id())));
            }
        }
        if let Some(i) = self.rule_hits.iter().position(|&h| h == 0) {
            return Err(SimError::Schedule(format!(
                "schedule[{i}] matched no message"
            )));
        }
        let logs = self
            .replicas
            .iter()
            .zip(&self.log_times)
            .map(|(r, times)| {
                r.log()
                    .iter()
                    .zip(times)
                    .enumerate()
                    .map(|(i, (e, &t))| TimedEntry {
                        index: i as u64,
                        time: t,
                        entry: e.clone(),
                    })
                    .collect()
            })
            .collect();
        Ok(SimOutcome {
            final_states: self.replicas.iter().map(|r| r.live_state()).collect(),
            logs,
            end_time: self.now,
            events: self.events,
            schema: self.schema,
            trace: self.trace,
            checkpoints: self.checkpoints,
            config: self.config,
        })
    }
}

/// Run a configuration to quiescence.
pub fn run(config: &SimConfig) -> Result<SimOutcome, SimError> {
    Sim::new(config.clone()).run()
}
