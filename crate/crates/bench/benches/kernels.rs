use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fae_bench::{caption_batch, classifier, explainer, random_images, random_matrix};
use fae_core::explainer::{DecodeMode, BOS};
use fae_core::numerics::{matmul_into, Tape};
use fae_core::training::{explainer_loss, CaptionExample, TrainConfig};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let (a, b) = (random_matrix(1, n * n), random_matrix(2, n * n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            let mut out = vec![0.0f32; n * n];
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                matmul_into(black_box(&a), black_box(&b), &mut out, n, n, n);
            });
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let clf = classifier();
    let images = random_images(3, 16);
    let refs: Vec<_> = images.iter().collect();
    c.bench_function("classifier forward, batch 16", |b| b.iter(|| clf.classify_batch(black_box(&refs)).unwrap()));
    c.bench_function("gradcam", |b| b.iter(|| clf.gradcam(black_box(&images[0]), 0).unwrap()));
}

fn decode(c: &mut Criterion) {
    let (e, a, features) = explainer();
    let state = e.initial_state(&features).unwrap();
    c.bench_function("decode step", |b| b.iter(|| e.decode_step(BOS, black_box(&state), &features).unwrap()));
    c.bench_function("greedy generate", |b| b.iter(|| e.generate(black_box(&features), DecodeMode::Greedy).unwrap()));
    c.bench_function("beam 3 generate", |b| b.iter(|| e.generate(black_box(&features), DecodeMode::Beam(3)).unwrap()));

    let batch = caption_batch(16);
    let refs: Vec<&CaptionExample<f32>> = batch.iter().collect();
    let config = TrainConfig::default();
    c.bench_function("explainer loss + backward, batch 16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let be = e.params.bind(&mut tape);
            let ba = a.params.bind(&mut tape);
            let loss = explainer_loss(&e, &a, &mut tape, &be, &ba, black_box(&refs), &config).unwrap();
            tape.backward(loss.total).unwrap()
        })
    });
}

criterion_group!(benches, matmul, conv, decode);
criterion_main!(benches);
