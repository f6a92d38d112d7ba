use criterion::{criterion_group, criterion_main, Criterion};
use flowpg::bc::{flow_matching_loss, Activation, FlowItem, VelocityNet};
use flowpg::matops::{solve_discrete_lyapunov, LyapunovForm, Matrix};
use flowpg::rng::{seeded, standard_normal};
use flowpg::trainer::{loss_gradient, surrogate_loss};
use flowpg_bench::pendulum_surrogate;
use std::hint::black_box;

fn lyapunov(c: &mut Criterion) {
    let mut group = c.benchmark_group("lyapunov");
    for n in [2usize, 4, 8] {
        // stable F with spectral radius ≤ 0.9
        let f = Matrix::from_fn(n, n, |i, j| if i == j { 0.5 } else { 0.4 / n as f64 });
        let q = Matrix::identity(n, n);
        group.bench_function(format!("n={n}"), |b| {
            b.iter(|| solve_discrete_lyapunov(black_box(&f), black_box(&q), LyapunovForm::Right).unwrap())
        });
    }
    group.finish();
}

fn surrogate(c: &mut Criterion) {
    let (s, k0) = pendulum_surrogate();
    c.bench_function("surrogate/loss", |b| b.iter(|| surrogate_loss(black_box(&k0), &s).unwrap()));
    c.bench_function("surrogate/gradient", |b| b.iter(|| loss_gradient(black_box(&k0), &s).unwrap()));
}

fn flow_loss(c: &mut Criterion) {
    let mut rng = seeded(1);
    let net = VelocityNet::new(2, 1, &[64, 64], Activation::Tanh, &mut rng).unwrap();
    let items: Vec<FlowItem> = (0..256)
        .map(|_| {
            let x = standard_normal(&mut rng, 2);
            let u = standard_normal(&mut rng, 1);
            FlowItem::draw(&x, &u, &mut rng)
        })
        .collect();
    c.bench_function("flow/loss_and_grad_batch256", |b| {
        b.iter(|| flow_matching_loss(black_box(&net), black_box(&items)).unwrap())
    });
}

criterion_group!(benches, lyapunov, surrogate, flow_loss);
criterion_main!(benches);
