use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kvsnap_core::artifact::CheckpointFile;
use kvsnap_core::fuzz::{random_config, FuzzParams};
use kvsnap_core::oracle::{verify_checkpoint, TraceIndex, VerifyOptions};
use kvsnap_core::simnet::run;

fn verify(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify");
    for txns in [50u32, 200, 800] {
        let p = FuzzParams {
            replicas: 4..=4,
            txns: txns..=txns,
            ..FuzzParams::default()
        };
        let out = run(&random_config(&p, 7)).unwrap();
        let cp = CheckpointFile::from(&out.checkpoints[0].checkpoint);
        let seqs: Vec<u64> = out.trace.iter().map(|r| r.seq).collect();
        g.bench_with_input(BenchmarkId::new("index", txns), &out.trace, |b, t| {
            b.iter(|| TraceIndex::build(black_box(t)).unwrap())
        });
        let ix = TraceIndex::build(&out.trace).unwrap();
        g.bench_with_input(BenchmarkId::new("checkpoint", txns), &cp, |b, cp| {
            b.iter(|| verify_checkpoint(&ix, &seqs, black_box(cp), VerifyOptions::default()))
        });
    }
    g.finish();
}

criterion_group!(benches, verify);
criterion_main!(benches);
