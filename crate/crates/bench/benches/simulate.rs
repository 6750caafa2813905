use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kvsnap_core::fuzz::{random_config, FuzzParams};
use kvsnap_core::simnet::run;

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    for n in [2u16, 3, 5] {
        let p = FuzzParams {
            replicas: n..=n,
            txns: 200..=200,
            rounds: 3,
            ..FuzzParams::default()
        };
        let cfg = random_config(&p, 42);
        g.bench_with_input(BenchmarkId::new("replicas", n), &cfg, |b, cfg| {
            b.iter(|| run(black_box(cfg)).unwrap())
        });
        // same workload, no checkpoints: the protocol's overhead is the gap
        let mut off = cfg.clone();
        off.checkpointing = false;
        off.triggers.clear();
        g.bench_with_input(
            BenchmarkId::new("replicas_no_checkpoint", n),
            &off,
            |b, cfg| b.iter(|| run(black_box(cfg)).unwrap()),
        );
    }
    g.finish();
}

criterion_group!(benches, simulate);
criterion_main!(benches);
