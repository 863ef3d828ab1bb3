//! Hot-path benchmarks: routing, the attraction update, the masked softmax,
//! the forward pass (biased vs. unbiased), and one full training step.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attract::attention::{masked_softmax, AttnMask, AttnTensor, BiasConfig};
use attract::backbone::{forward, train_step, BackboneConfig};
use attract_bench::{routing_table, toy_optimizer, toy_policy, toy_window, warm_table};

fn bench_route(c: &mut Criterion) {
    let table = routing_table();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probes: Vec<Vec<f64>> =
        (0..256).map(|_| (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect()).collect();
    let mut i = 0;
    c.bench_function("route_hit", |b| {
        b.iter(|| {
            i = (i + 1) % probes.len();
            black_box(table.route(black_box(&probes[i])).unwrap())
        })
    });
}

fn bench_decay_reinforce(c: &mut Criterion) {
    let mut table = warm_table(27, 2);
    let mut i = 0usize;
    c.bench_function("decay_reinforce_27", |b| {
        b.iter(|| {
            i = (i + 1) % 27;
            table.decay_reinforce(black_box(i), black_box(0.25)).unwrap();
            black_box(table.values()[i])
        })
    });
}

fn bench_masked_softmax(c: &mut Criterion) {
    let (heads, seq) = (2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores = AttnTensor::from_fn(1, heads, seq, |_, _, r, col| {
        if col <= r {
            rng.gen_range(-2.0..2.0)
        } else {
            0.0
        }
    });
    let mask = AttnMask::causal(seq);
    c.bench_function("masked_softmax_2x12", |b| {
        b.iter(|| black_box(masked_softmax(black_box(&scores), &mask).unwrap()))
    });
}

fn bench_forward(c: &mut Criterion) {
    let params = toy_policy(4);
    let cfg = params.config().clone();
    let batch: Vec<_> = (0..8).map(|i| toy_window(&cfg, 100 + i)).collect();
    let table = warm_table(27, 5);
    let bias = BiasConfig::default();

    c.bench_function("forward_b8_unbiased", |b| {
        b.iter(|| black_box(forward(black_box(&params), &batch, None).unwrap()))
    });
    c.bench_function("forward_b8_biased", |b| {
        b.iter(|| {
            black_box(forward(black_box(&params), &batch, Some((&table, &bias))).unwrap())
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let batch: Vec<_> = (0..8).map(|i| toy_window(&cfg, 200 + i)).collect();
    let mut params = toy_policy(6);
    let mut opt = toy_optimizer(&params);
    c.bench_function("train_step_b8", |b| {
        b.iter(|| black_box(train_step(&mut params, &batch, None, &mut opt).unwrap().lagrangian))
    });
}

criterion_group!(
    kernels,
    bench_route,
    bench_decay_reinforce,
    bench_masked_softmax,
    bench_forward,
    bench_train_step
);
criterion_main!(kernels);
