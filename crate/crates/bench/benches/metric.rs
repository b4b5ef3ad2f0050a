use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fiberwalk_core::explore::{exploration_rng, simec_step, ExplorationConfig, Mode};
use fiberwalk_core::geometry::{eigen_split, pullback_metric, DEFAULT_NULL_TOL};
use fiberwalk_core::{Network, VitConfig};

fn desk() -> (Network, Vec<f64>) {
    let net = VitConfig::desk().build().unwrap();
    let img: Vec<f64> = (0..784).map(|i| ((i * 31) % 97) as f64 / 96.0).collect();
    let e = net.embed(&img).unwrap();
    (net, e)
}

fn jacobian(c: &mut Criterion) {
    let (net, e) = desk();
    c.bench_function("jacobian_desk", |b| b.iter(|| net.jacobian(&e, net.embed_boundary()).unwrap()));
}

fn decomposition(c: &mut Criterion) {
    let (net, e) = desk();
    let g = pullback_metric(&net, &e, net.embed_boundary(), None).unwrap();
    c.bench_function("eigen_split_392", |b| b.iter(|| eigen_split(&g, DEFAULT_NULL_TOL).unwrap()));
}

fn step(c: &mut Criterion) {
    let (net, e) = desk();
    let cfg = ExplorationConfig::new(Mode::Simec, 1, 0);
    c.bench_function("simec_step_desk", |b| {
        b.iter_batched(
            || exploration_rng(Mode::Simec, 0),
            |mut rng| simec_step(&net, &e, &cfg, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = jacobian, decomposition, step
}
criterion_main!(benches);
