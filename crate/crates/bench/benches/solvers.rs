use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ddlearn_bench::{single_asset, table2};
use ddlearn_core::dp_grid::{self, GridConfig};
use ddlearn_core::filter::{kalman_step, KalmanState};
use ddlearn_core::market::NoiseSampler;
use ddlearn_core::neural::{self, DenseNet, Init};
use ddlearn_core::rng::substream;
use ddlearn_core::simulator::{simulate, SimOptions, Strategy};
use rand::Rng;

fn filter(c: &mut Criterion) {
    let p = table2();
    let noise = NoiseSampler::new(&p.gamma).unwrap();
    let b: Vec<f64> = p.b0.iter().copied().collect();
    let ret = noise.sample(&mut substream(1, "bench", 0), &b);
    let st = KalmanState::from_params(&p);
    c.bench_function("kalman_step_d3", |bch| bch.iter(|| kalman_step(black_box(&st), black_box(&ret), &p.gamma).unwrap()));
}

fn grid(c: &mut Criterion) {
    let p = single_asset(4);
    let cfg = GridConfig { r_nodes: 21, b_nodes: 7, ..GridConfig::default() };
    let mut g = c.benchmark_group("grid");
    g.sample_size(10);
    g.bench_function("solve_backward_d1_n4", |bch| bch.iter(|| dp_grid::solve_backward(black_box(&p), &cfg).unwrap()));
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = substream(2, "bench", 0);
    let net = DenseNet::control(3, Init::HeUniform, 1e-3, &mut rng);
    let batch: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    c.bench_function("control_grad_batch300_d3", |bch| {
        bch.iter(|| neural::grad(black_box(&net), &batch, |_, o| (o.iter().sum(), vec![1.0; o.len()])).unwrap())
    });
}

fn paths(c: &mut Criterion) {
    let p = table2();
    let ew = Strategy::equal_weight(p.q, p.d);
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    g.bench_function("equal_weight_1000_paths", |bch| bch.iter(|| simulate(&ew, &p, &SimOptions::new(1000, 3)).unwrap()));
    g.finish();
}

criterion_group!(benches, filter, grid, network, paths);
criterion_main!(benches);
