//! Randomized campaigns: draw a configuration from a seed, simulate it, and
//! run every check on the result.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifact::CheckpointFile;
use crate::model::ResolverKind;
use crate::oracle::mutate::{mutate, Mutation};
use crate::oracle::run::{check_run, expected_final_state, RunChecks};
use crate::oracle::{verify_checkpoint, TraceIndex, Verdict, VerifyOptions};
use crate::simnet::{
    run, ChannelConfig, DelayConfig, Policy, RandomWorkload, SimConfig, SimOutcome, Trigger,
    Workload,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzParams {
    pub replicas: RangeInclusive<u16>,
    pub txns: RangeInclusive<u32>,
    pub policy: Policy,
    /// Checkpoint triggers per run.
    pub rounds: usize,
    pub checkpointing: bool,
    pub dup_prob: f64,
    pub linearizations: usize,
    /// Also try every mutation class against every checkpoint.
    pub mutations: bool,
}

impl Default for FuzzParams {
    fn default() -> Self {
        FuzzParams {
            replicas: 2..=5,
            txns: 50..=200,
            policy: Policy::Reorder,
            rounds: 1,
            checkpointing: true,
            dup_prob: 0.0,
            linearizations: crate::oracle::DEFAULT_LINEARIZATIONS,
            mutations: false,
        }
    }
}

/// Draw a simulation configuration. Same params and seed, same config.
pub fn random_config(p: &FuzzParams, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b76_736e_6170);
    let replicas = rng.random_range(p.replicas.clone());
    let keys = rng.random_range(4..=16);
    let txns = rng.random_range(p.txns.clone());
    let span = txns as u64 * rng.random_range(1..=3);
    let max_writes = rng.random_range(1..=3.min(keys));
    let delay = |rng: &mut ChaCha8Rng, mean: f64, max: u64| DelayConfig {
        base: rng.random_range(1..=3),
        mean_extra: rng.random_range(0.0..mean),
        max_extra: max,
    };
    let replication = delay(&mut rng, 8.0, 40);
    let control = delay(&mut rng, 6.0, 30);
    let mut triggers: Vec<Trigger> = if p.checkpointing {
        (0..p.rounds)
            .map(|_| Trigger::At(rng.random_range(0..=span)))
            .collect()
    } else {
        Vec::new()
    };
    triggers.sort_by_key(|t| match t {
        Trigger::At(t) | Trigger::AfterCommits(t) => *t,
    });
    SimConfig {
        replicas,
        seed,
        resolver: if rng.random_range(0..4) == 0 {
            ResolverKind::Counter
        } else {
            ResolverKind::Lww
        },
        keys,
        initial_value: 0,
        workload: Workload::Random(RandomWorkload {
            txns,
            span,
            exec_ticks: [1, rng.random_range(1..=6)],
            writes: [1, max_writes],
            reads: [0, 2],
            max_value: 1000,
        }),
        triggers,
        checkpointing: p.checkpointing,
        channels: ChannelConfig {
            policy: p.policy,
            replication,
            control,
            dup_prob: p.dup_prob,
            ..ChannelConfig::default()
        },
        sender: DelayConfig {
            base: 0,
            mean_extra: rng.random_range(0.0..3.0),
            max_extra: 8,
        },
        flush_chunk: rng.random_range(1..=4),
        schedule: Vec::new(),
        max_events: 2_000_000,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MutationTally {
    pub applied: usize,
    pub rejected: usize,
    /// Mutation classes applied to each checkpoint, minimum over checkpoints.
    pub min_classes_per_checkpoint: usize,
    pub by_class: BTreeMap<String, (usize, usize)>,
    pub escaped: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub replicas: u16,
    pub txns: usize,
    pub error: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub run: Option<RunChecks>,
    /// All replicas hold the same state at the end.
    pub converged: bool,
    /// That state is the fold of every committed transaction.
    pub final_is_fold: bool,
    pub mutations: Option<MutationTally>,
    /// Ticks from trigger to completion, per checkpoint.
    pub latencies: Vec<u64>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self.verdicts.iter().all(Verdict::passed)
            && self.run.as_ref().is_some_and(RunChecks::passed)
            && self.converged
            && self.final_is_fold
            && self
                .mutations
                .as_ref()
                .is_none_or(|m| m.rejected == m.applied)
    }
}

/// Check a finished simulation with the oracle.
pub fn check_outcome(out: &SimOutcome, opts: VerifyOptions, mutations: bool) -> RunReport {
    let mut report = RunReport {
        seed: out.config.seed,
        replicas: out.config.replicas,
        txns: 0,
        error: None,
        verdicts: Vec::new(),
        run: None,
        converged: false,
        final_is_fold: false,
        mutations: None,
        latencies: out
            .checkpoints
            .iter()
            .map(|c| c.completed_at - c.started_at)
            .collect(),
    };
    let ix = match TraceIndex::build(&out.trace) {
        Ok(ix) => ix,
        Err(e) => {
            report.error = Some(format!("malformed trace: {e}"));
            return report;
        }
    };
    report.txns = ix.commits.len();
    let seqs: Vec<u64> = out.trace.iter().map(|r| r.seq).collect();
    let files: Vec<CheckpointFile> = out
        .checkpoints
        .iter()
        .map(|c| CheckpointFile::from(&c.checkpoint))
        .collect();
    for (i, f) in files.iter().enumerate() {
        let o = VerifyOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..opts
        };
        report.verdicts.push(verify_checkpoint(&ix, &seqs, f, o));
    }
    report.run = Some(check_run(&out.trace, &ix));
    report.converged = out.final_states.windows(2).all(|w| w[0] == w[1]);
    report.final_is_fold = match expected_final_state(&ix) {
        Ok(s) => out.final_states.iter().all(|f| *f == s),
        Err(_) => false,
    };
    if mutations {
        let mut tally = MutationTally {
            min_classes_per_checkpoint: usize::MAX,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d75_7461_7465);
        for (i, f) in files.iter().enumerate() {
            let mut classes = 0;
            for m in Mutation::ALL {
                let Some(bad) = mutate(&ix, f, m, &mut rng) else {
                    continue;
                };
                classes += 1;
                let o = VerifyOptions {
                    seed: opts.seed.wrapping_add(i as u64),
                    ..opts
                };
                let v = verify_checkpoint(&ix, &seqs, &bad, o);
                tally.applied += 1;
                let entry = tally.by_class.entry(format!("{m:?}")).or_default();
                entry.0 += 1;
                if !v.passed() {
                    tally.rejected += 1;
                    entry.1 += 1;
                } else {
                    tally
                        .escaped
                        .push(format!("{m:?} on checkpoint {}", f.cp_num));
                }
            }
            tally.min_classes_per_checkpoint = tally.min_classes_per_checkpoint.min(classes);
        }
        if files.is_empty() {
            tally.min_classes_per_checkpoint = 0;
        }
        report.mutations = Some(tally);
    }
    report
}

pub fn run_and_check(p: &FuzzParams, seed: u64) -> RunReport {
    let config = random_config(p, seed);
    match run(&config) {
        Ok(out) => check_outcome(
            &out,
            VerifyOptions {
                linearizations: p.linearizations,
                seed,
            },
            p.mutations,
        ),
        Err(e) => RunReport {
            seed,
            replicas: config.replicas,
            txns: 0,
            error: Some(e.to_string()),
            verdicts: Vec::new(),
            run: None,
            converged: false,
            final_is_fold: false,
            mutations: None,
            latencies: Vec::new(),
        },
    }
}

/// Run `runs` seeds starting at `seed_base`, in parallel, reports in seed order.
pub fn campaign(p: &FuzzParams, seed_base: u64, runs: u64) -> Vec<RunReport> {
    (seed_base..seed_base + runs)
        .into_par_iter()
        .map(|s| run_and_check(p, s))
        .collect()
}
