use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use lain_bench::{committed_chain, desk_env, desk_net};
use lain_core::env::RandomPolicy;
use lain_core::instances::six_uav_snapshots;
use lain_core::ledger::{verify_chain, CryptoKind};
use lain_core::oracle::solve_exact;

fn network(c: &mut Criterion) {
    let net = desk_net(0);
    let inputs: Vec<Vec<f64>> = (0..32)
        .map(|i| (0..net.input_dim()).map(|j| ((i * 31 + j * 7) % 17) as f64 / 17.0).collect())
        .collect();
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let actions: Vec<usize> = (0..32).map(|i| i % net.output_dim()).collect();
    let targets = vec![-0.5; 32];
    c.bench_function("forward/single", |b| b.iter(|| net.forward(black_box(xs[0])).unwrap()));
    c.bench_function("forward/batch32", |b| b.iter(|| net.forward_batch(black_box(&xs)).unwrap()));
    c.bench_function("backward/batch32", |b| {
        b.iter(|| net.loss_and_gradients(black_box(&xs), &actions, &targets).unwrap())
    });
}

fn environment(c: &mut Criterion) {
    for (name, crypto) in [("env_step/fast", CryptoKind::Fast), ("env_step/real", CryptoKind::Real)] {
        let mut env = desk_env(crypto, 0);
        let mut policy = RandomPolicy::new(0);
        c.bench_function(name, |b| {
            b.iter(|| {
                let d = env.decide(&mut policy).unwrap();
                env.step(black_box(&d)).unwrap()
            })
        });
    }
}

fn oracle(c: &mut Criterion) {
    let snapshots = six_uav_snapshots().unwrap();
    let mut g = c.benchmark_group("solve_exact");
    g.sample_size(10);
    for (i, s) in snapshots.iter().enumerate() {
        g.bench_function(format!("six_uav/{}demands/{i}", s.demands().len()), |b| {
            b.iter(|| solve_exact(black_box(s)).unwrap())
        });
    }
    g.finish();
}

fn ledger(c: &mut Criterion) {
    let (chain, crypto) = committed_chain(50, CryptoKind::Real);
    c.bench_function("verify_chain/50", |b| {
        b.iter_batched(|| chain.clone(), |ch| verify_chain(&ch, &crypto), BatchSize::SmallInput)
    });
}

criterion_group!(benches, network, environment, oracle, ledger);
criterion_main!(benches);
