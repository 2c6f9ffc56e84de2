use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use iol_core::baselines::metrics::auc;
use iol_core::model::{ElboNoise, IolModel, ModelConfig};
use iol_core::seed::rng_for;
use iol_core::sim::{run_simulation, SimConfig};
use rand::Rng;

fn elbo_gradient(c: &mut Criterion) {
    let sim = run_simulation(&SimConfig { n_traj: 1, ..SimConfig::default() }).unwrap();
    let traj = &sim.corpus[0];
    let model = IolModel::new(ModelConfig::default(), traj.dim()).unwrap();
    let noise = ElboNoise::draw(&mut rng_for(0, 1), 1, traj.len(), model.memory_dim());
    c.bench_function("elbo_with_grad T=50", |b| {
        b.iter(|| model.elbo_with_grad(black_box(traj), &noise, 1.0).unwrap())
    });
}

fn simulate(c: &mut Criterion) {
    let cfg = SimConfig { n_traj: 200, ..SimConfig::default() };
    c.bench_function("simulate 200x50", |b| b.iter(|| run_simulation(black_box(&cfg)).unwrap()));
}

fn ranking_metrics(c: &mut Criterion) {
    let mut rng = rng_for(0, 2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..10_000).map(|_| u8::from(rng.random_bool(0.4))).collect();
    c.bench_function("auc n=10000", |b| b.iter(|| auc(black_box(&scores), &labels)));
}

criterion_group!(benches, elbo_gradient, simulate, ranking_metrics);
criterion_main!(benches);
