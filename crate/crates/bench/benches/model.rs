//! Whole-model benchmarks: inference and one training step on the desk-scale
//! preset.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vitae_core::model::build_preset;
use vitae_core::rng::SplitMix64;
use vitae_core::tensor::{ops, Tape, Tensor};

fn bench_tiny_desk(c: &mut Criterion) {
    let model = build_preset::<f32>("tiny-desk", 0).unwrap();
    let mut rng = SplitMix64::new(0);
    let images = Tensor::<f32>::uniform(&[64, 3, 32, 32], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..64).map(|_| rng.next_below(10)).collect();

    let mut group = c.benchmark_group("tiny-desk");
    group.sample_size(10);
    group.bench_function("inference batch 64", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            black_box(model.forward_classify(&mut tape, &images, false, false).unwrap())
        })
    });
    group.bench_function("forward+backward batch 64", |b| {
        b.iter(|| {
            let mut tape = Tape::recording();
            let (logits, _) = model.forward_classify(&mut tape, &images, true, false).unwrap();
            let loss = ops::cross_entropy(&mut tape, &logits, &labels).unwrap();
            tape.backward(&loss).unwrap();
            black_box(loss.item())
        })
    });
    group.finish();
}

fn bench_vitae_t_inference(c: &mut Criterion) {
    let model = build_preset::<f32>("vitae-t", 0).unwrap();
    let mut rng = SplitMix64::new(1);
    let image = Tensor::<f32>::uniform(&[1, 3, 224, 224], 0.0, 1.0, &mut rng);

    let mut group = c.benchmark_group("vitae-t");
    group.sample_size(10);
    group.bench_function("inference 224 single image", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            black_box(model.forward_classify(&mut tape, &image, false, false).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, bench_tiny_desk, bench_vitae_t_inference);
criterion_main!(benches);
