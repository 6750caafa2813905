//! `kvsnap`: run scenarios, verify their output, fuzz, and recover.
//!
//! Exit status:
//!
//! | code | meaning                                             |
//! |------|-----------------------------------------------------|
//! | 0    | success                                             |
//! | 1    | a verification check failed (or a protocol fault)   |
//! | 2    | bad usage or a file that violates its schema        |
//! | 3    | I/O error (missing file, unwritable directory)      |
//! | 4    | malformed trace                                     |
//! | 5    | the simulation did not quiesce                      |
//! | 6    | recovery impossible from the given checkpoint/logs  |

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kvsnap_core::artifact::{
    self, read_checkpoint_dir, read_json, read_logs_dir, read_trace, write_json, write_jsonl,
    ArtifactError, CheckpointFile, RunMeta, StateEntry, META_FILE,
};
use kvsnap_core::fuzz::{campaign, random_config, FuzzParams, RunReport};
use kvsnap_core::oracle::run::check_run;
use kvsnap_core::oracle::{verify_checkpoint, TraceIndex, VerifyOptions, DEFAULT_LINEARIZATIONS};
use kvsnap_core::recovery::{self, RecoveryError};
use kvsnap_core::simnet::{self, Policy, SimConfig, SimError};
use kvsnap_core::trace::to_jsonl;
use kvsnap_core::{Key, ReplicaId, Versioned};

const EXIT_VERIFY: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_TRACE: u8 = 4;
const EXIT_LIVENESS: u8 = 5;
const EXIT_UNRECOVERABLE: u8 = 6;

#[derive(Parser)]
#[command(
    name = "kvsnap",
    version,
    about = "Checkpointing simulator, verifier and recovery tool"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Channel {
    Fifo,
    Reorder,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace, checkpoints and logs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
    },
    /// Check every checkpoint in a directory against a trace.
    Verify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LINEARIZATIONS)]
        linearizations: usize,
    },
    /// Randomized campaign, verified inline.
    Fuzz {
        #[arg(long, default_value_t = 100)]
        runs: u64,
        #[arg(long, default_value = "2..5", value_parser = parse_range::<u16>)]
        replicas: RangeInclusive<u16>,
        #[arg(long, default_value = "50..200", value_parser = parse_range::<u32>)]
        txns: RangeInclusive<u32>,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, value_enum, default_value_t = Channel::Reorder)]
        channel: Channel,
        /// Checkpoints triggered per run.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Run without checkpointing (convergence only).
        #[arg(long)]
        no_checkpoint: bool,
        /// Also inject corruptions into every checkpoint and expect rejection.
        #[arg(long)]
        mutations: bool,
        #[arg(long, default_value_t = 0.0)]
        dup_prob: f64,
    },
    /// Rebuild the database from a checkpoint and the commit-logs.
    Recover {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with log-r<i>.jsonl files and meta.json.
        #[arg(long)]
        logs: PathBuf,
        /// Treat the logs as cut off at this tick (a crash).
        #[arg(long)]
        at: Option<u64>,
        /// Write the recovered state here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `A..B`, both ends inclusive.
fn parse_range<T: std::str::FromStr + PartialOrd>(s: &str) -> Result<RangeInclusive<T>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: T = a
        .trim()
        .parse()
        .map_err(|_| format!("bad lower bound in {s:?}"))?;
    let b: T = b
        .trim()
        .parse()
        .map_err(|_| format!("bad upper bound in {s:?}"))?;
    if a > b {
        return Err(format!("empty range {s:?}"));
    }
    Ok(a..=b)
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

/// I/O problems map to 3, anything unparsable to `parse_code`.
fn artifact_failure(e: ArtifactError, parse_code: u8) -> Failure {
    let code = match e {
        ArtifactError::Io { .. } => EXIT_IO,
        _ => parse_code,
    };
    Failure::new(code, e.to_string())
}

fn sim_failure(e: SimError) -> Failure {
    let code = match e {
        SimError::Config(_) | SimError::Schedule(_) => EXIT_SCHEMA,
        SimError::Liveness { .. } => EXIT_LIVENESS,
        SimError::Protocol(_) => EXIT_VERIFY,
    };
    Failure::new(code, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            trace,
            checkpoint_dir,
        } => cmd_run(&config, seed, &trace, &checkpoint_dir),
        Command::Verify {
            trace,
            checkpoints,
            linearizations,
        } => cmd_verify(&trace, &checkpoints, linearizations),
        Command::Fuzz {
            runs,
            replicas,
            txns,
            seed_base,
            channel,
            rounds,
            no_checkpoint,
            mutations,
            dup_prob,
        } => {
            let params = FuzzParams {
                replicas,
                txns,
                policy: match channel {
                    Channel::Fifo => Policy::Fifo,
                    Channel::Reorder => Policy::Reorder,
                },
                rounds,
                checkpointing: !no_checkpoint,
                dup_prob,
                mutations,
                ..FuzzParams::default()
            };
            cmd_fuzz(&params, seed_base, runs)
        }
        Command::Recover {
            checkpoint,
            logs,
            at,
            out,
        } => cmd_recover(&checkpoint, &logs, at, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("kvsnap: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn state_entries(state: &BTreeMap<Key, Versioned>) -> Vec<StateEntry> {
    state
        .iter()
        .map(|(k, v)| StateEntry {
            key: k.clone(),
            value: v.value,
            ts: v.ts,
        })
        .collect()
}

fn cmd_run(config: &Path, seed: Option<u64>, trace: &Path, dir: &Path) -> Result<(), Failure> {
    let mut cfg: SimConfig = read_json(config).map_err(|e| artifact_failure(e, EXIT_SCHEMA))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = simnet::run(&cfg).map_err(sim_failure)?;
    let io = |e| artifact_failure(e, EXIT_IO);

    std::fs::write(trace, to_jsonl(&out.trace))
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", trace.display())))?;
    for c in &out.checkpoints {
        let file = CheckpointFile::from(&c.checkpoint);
        write_json(&dir.join(file.file_name()), &file).map_err(io)?;
    }
    let logs = dir.join("logs");
    for (r, log) in out.logs.iter().enumerate() {
        write_jsonl(
            &logs.join(artifact::log_file_name(ReplicaId(r as u16))),
            log,
        )
        .map_err(io)?;
    }
    let meta = RunMeta {
        replicas: cfg.replicas,
        resolver: cfg.resolver,
        keys: out.schema.keys.clone(),
        initial_value: out.schema.initial_value,
    };
    write_json(&logs.join(META_FILE), &meta).map_err(io)?;
    let finals: Vec<Vec<StateEntry>> = out.final_states.iter().map(state_entries).collect();
    write_json(&dir.join("final.json"), &finals).map_err(io)?;

    let converged = out.final_states.windows(2).all(|w| w[0] == w[1]);
    println!(
        "run seed={} replicas={} end_time={} events={} trace_records={}",
        cfg.seed,
        cfg.replicas,
        out.end_time,
        out.events,
        out.trace.len()
    );
    for c in &out.checkpoints {
        println!(
            "checkpoint cp_num={} cp_set={} started={} completed={}",
            c.checkpoint.cp_num,
            c.checkpoint.cp_set.len(),
            c.started_at,
            c.completed_at
        );
    }
    println!("final converged={converged}");
    Ok(())
}

fn cmd_verify(trace_path: &Path, dir: &Path, linearizations: usize) -> Result<(), Failure> {
    let trace = read_trace(trace_path).map_err(|e| artifact_failure(e, EXIT_TRACE))?;
    let cps = read_checkpoint_dir(dir).map_err(|e| artifact_failure(e, EXIT_SCHEMA))?;
    let ix = TraceIndex::build(&trace).map_err(|e| Failure::new(EXIT_TRACE, e.to_string()))?;
    let seqs: Vec<u64> = trace.iter().map(|r| r.seq).collect();
    let mut ok = true;
    for (i, (path, cp)) in cps.iter().enumerate() {
        let v = verify_checkpoint(
            &ix,
            &seqs,
            cp,
            VerifyOptions {
                linearizations,
                seed: i as u64,
            },
        );
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        let fields: Vec<String> = v.fields().iter().map(|(k, b)| format!("{k}={b}")).collect();
        println!(
            "checkpoint {name} cp_num={} {} linearizations={}{}",
            v.cp_num,
            fields.join(" "),
            v.linearizations,
            if v.exhaustive { " (all)" } else { "" }
        );
        for c in &v.counterexamples {
            println!(
                "  counterexample {} # {c}",
                serde_json::to_string(c).expect("counterexamples serialize")
            );
        }
        ok &= v.passed();
    }
    let run = check_run(&trace, &ix);
    let expected = 2 * (run.replicas as usize - 1);
    for (cp, count) in &run.control_per_round {
        println!("control round={cp} messages={count} expected={expected}");
    }
    println!(
        "run control_ok={} piggyback_ok={} async_ok={} counter_alternation_ok={} polarity_swap_writes={}",
        run.control_ok,
        run.piggyback_ok,
        run.async_ok,
        run.counter_alternation_ok,
        run.polarity_swap_writes
    );
    for p in &run.problems {
        println!("  problem {p}");
    }
    ok &= run.passed();
    println!("verdict {}", if ok { "pass" } else { "fail" });
    if ok {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY, "verification failed"))
    }
}

fn summarize(reports: &[RunReport]) {
    let passed = reports.iter().filter(|r| r.passed()).count();
    let checkpoints: usize = reports.iter().map(|r| r.verdicts.len()).sum();
    let mut latencies: Vec<u64> = reports
        .iter()
        .flat_map(|r| r.latencies.iter().copied())
        .collect();
    latencies.sort_unstable();
    let pct = |p: usize| {
        latencies
            .get((latencies.len().saturating_sub(1)) * p / 100)
            .copied()
    };
    let (mut replicate, mut control) = (0usize, 0usize);
    for r in reports.iter().filter_map(|r| r.run.as_ref()) {
        replicate += r.replicate_sends;
        control += r.control_per_round.values().sum::<usize>();
    }
    println!("{:<22}{:>12}", "runs", reports.len());
    println!("{:<22}{:>12}", "passed", passed);
    println!(
        "{:<22}{:>11.1}%",
        "pass rate",
        100.0 * passed as f64 / reports.len().max(1) as f64
    );
    println!("{:<22}{:>12}", "checkpoints", checkpoints);
    println!("{:<22}{:>12}", "replicate messages", replicate);
    println!("{:<22}{:>12}", "control messages", control);
    if let (Some(p50), Some(p99), Some(max)) = (pct(50), pct(99), latencies.last()) {
        println!("{:<22}{:>12}", "latency p50 (ticks)", p50);
        println!("{:<22}{:>12}", "latency p99 (ticks)", p99);
        println!("{:<22}{:>12}", "latency max (ticks)", max);
    }
    let (applied, rejected) = reports
        .iter()
        .filter_map(|r| r.mutations.as_ref())
        .fold((0, 0), |(a, b), m| (a + m.applied, b + m.rejected));
    if applied > 0 {
        println!("{:<22}{:>12}", "mutations applied", applied);
        println!("{:<22}{:>12}", "mutations rejected", rejected);
    }
}

fn cmd_fuzz(params: &FuzzParams, seed_base: u64, runs: u64) -> Result<(), Failure> {
    if runs == 0 {
        return Err(Failure::new(EXIT_SCHEMA, "--runs must be at least 1"));
    }
    let reports = campaign(params, seed_base, runs);
    summarize(&reports);
    let failed: Vec<&RunReport> = reports.iter().filter(|r| !r.passed()).collect();
    if let Some(first) = failed.first() {
        for r in &failed {
            let why = r.error.clone().unwrap_or_else(|| {
                let bad: Vec<String> = r
                    .verdicts
                    .iter()
                    .filter(|v| !v.passed())
                    .map(|v| format!("cp {}", v.cp_num))
                    .collect();
                format!("failed checks: {}", bad.join(", "))
            });
            println!("FAIL seed={} {why}", r.seed);
        }
        let cfg = random_config(params, first.seed);
        println!("reproduce: seed={}", first.seed);
        println!(
            "config: {}",
            serde_json::to_string(&cfg).expect("configs serialize")
        );
        return Err(Failure::new(
            EXIT_VERIFY,
            format!("{} of {} runs failed", failed.len(), reports.len()),
        ));
    }
    Ok(())
}

fn cmd_recover(
    checkpoint: &Path,
    logs_dir: &Path,
    at: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let meta: RunMeta =
        read_json(&logs_dir.join(META_FILE)).map_err(|e| artifact_failure(e, EXIT_SCHEMA))?;
    let cp: CheckpointFile = read_json(checkpoint).map_err(|e| artifact_failure(e, EXIT_SCHEMA))?;
    let mut logs = read_logs_dir(logs_dir, meta.replicas)
        .map_err(|e| artifact_failure(e, EXIT_UNRECOVERABLE))?;
    if let Some(t) = at {
        for log in logs.values_mut() {
            log.retain(|e| e.time <= t);
        }
    }
    let unrecoverable =
        |e: RecoveryError| Failure::new(EXIT_UNRECOVERABLE, format!("unrecoverable: {e}"));
    let plan = recovery::plan(&cp.to_checkpoint(), &logs, meta.replicas, &meta.schema())
        .map_err(unrecoverable)?;
    let states = recovery::execute(&plan, meta.replicas, meta.resolver).map_err(unrecoverable)?;
    let converged = states.windows(2).all(|w| w[0] == w[1]);
    println!(
        "recover cp_num={} replicas={} replayed={} converged={converged}",
        cp.cp_num,
        meta.replicas,
        plan.suffix.len()
    );
    if let Some(path) = out {
        write_json(path, &state_entries(&states[0])).map_err(|e| artifact_failure(e, EXIT_IO))?;
    } else {
        for e in state_entries(&states[0]) {
            println!(
                "{}",
                serde_json::to_string(&e).expect("state entries serialize")
            );
        }
    }
    if converged {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_UNRECOVERABLE,
            "replicas disagree after recovery",
        ))
    }
}
