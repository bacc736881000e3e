use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use tpg_bench::desk_fixture;
use tpg_core::optim::AdamW;
use tpg_core::rng;
use tpg_core::tensor::conv2d;
use tpg_core::Tensor;

fn kernels(c: &mut Criterion) {
    let mut r = rng::stream(0, 0);
    let a = Tensor::randn(&[64, 64], 1.0, &mut r);
    let b = Tensor::randn(&[64, 64], 1.0, &mut r);
    c.bench_function("matmul 64x64", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));

    let x = Tensor::randn(&[16, 32, 32], 1.0, &mut r);
    let w = Tensor::randn(&[16, 16, 3, 3], 0.1, &mut r);
    c.bench_function("conv2d 16x32x32 k3", |bch| {
        bch.iter(|| black_box(conv2d(&x, &w, None, 1, 1).unwrap()))
    });
}

fn denoiser(c: &mut Criterion) {
    let (cfg, mut model, samples) = desk_fixture(8);
    let schedule = cfg.sde.schedule().unwrap();
    let s = &samples[0];
    let t = schedule.steps() / 2;
    c.bench_function("unet forward (desk)", |bch| {
        bch.iter(|| black_box(model.predict_noise(&schedule, &s.x_lq, &s.x_lq, t, &s.frozen).unwrap()))
    });

    let batch: Vec<&_> = samples.iter().collect();
    let mut opt = AdamW::new(cfg.stage2.optim.clone(), 1_000_000);
    let mut r = rng::stream(1, 0);
    c.bench_function("stage-2 step, batch 8 (desk)", |bch| {
        bch.iter(|| black_box(model.training_step(&mut opt, &schedule, &batch, &mut r).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, denoiser
}
criterion_main!(benches);
