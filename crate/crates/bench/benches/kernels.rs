use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sphere_icl::rng::RngStream;
use sphere_icl::sphere::{beta_inv_cdf, sample_band, sample_cap, BandSpec, CapSpec};
use sphere_icl_bench::desk_trainer;

fn samplers(c: &mut Criterion) {
    let cap = CapSpec::around_e1(10, 60f64.to_radians()).unwrap();
    let band = BandSpec::around_e1(10, 170f64.to_radians(), 5f64.to_radians()).unwrap();
    let mut rng = RngStream::new(0, 0);
    c.bench_function("sample_cap d=10", |b| b.iter(|| sample_cap(&mut rng, black_box(&cap)).unwrap()));
    c.bench_function("sample_band d=10", |b| b.iter(|| sample_band(&mut rng, black_box(&band)).unwrap()));
    c.bench_function("beta_inv_cdf", |b| b.iter(|| beta_inv_cdf(black_box(0.37), 4.5, 4.5).unwrap()));
}

fn training(c: &mut Criterion) {
    let (mut trainer, data) = desk_trainer(std::f64::consts::FRAC_PI_2);
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);
    g.bench_function("train_step", |b| b.iter(|| trainer.step(&data).unwrap()));
    let mut rng = RngStream::new(1, 0);
    let batch = data.next_batch(&mut rng).unwrap();
    g.bench_function("loss_and_grads", |b| b.iter(|| trainer.params.loss_and_grads(black_box(&batch)).unwrap()));
    g.bench_function("next_batch", |b| b.iter(|| data.next_batch(&mut rng).unwrap()));
    g.finish();
}

criterion_group!(benches, samplers, training);
criterion_main!(benches);
