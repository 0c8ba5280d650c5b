use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jcdnet::model::{infer, Params};
use jcdnet::seeded_rng;
use jcdnet::train::Trainer;
use jcdnet_bench::{synthetic_fixture, widened};
use std::hint::black_box;

fn train_step(c: &mut Criterion) {
    let (cfg, data) = synthetic_fixture();
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    c.bench_function("train_step/synthetic_batch16", |b| {
        b.iter(|| black_box(trainer.step(&data).unwrap()))
    });
}

fn eval_forward(c: &mut Criterion) {
    let (cfg, data) = synthetic_fixture();
    let x = data.videos[0].features.clone();
    let mut group = c.benchmark_group("eval_forward");
    for hidden in [32, 128, 512] {
        let model = widened(&cfg, cfg.model.feature_dim, hidden).model_config();
        let params = Params::<f32>::init(&model, &mut seeded_rng(0));
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| black_box(infer(&x, &model, &params).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, eval_forward);
criterion_main!(benches);
