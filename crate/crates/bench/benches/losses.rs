use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bdd_core::losses::{
    bdd_loss, bdd_loss_accumulated, bdd_seg_loss, DistillConfig, LogitBatch,
};
use bdd_core::{Graph, Tensor};

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

fn bench_balanced(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, cols) = (64, 10);
    let cfg = DistillConfig::default();
    let student = random_logits(&mut rng, rows * cols);
    let teacher = random_logits(&mut rng, rows * cols);

    c.bench_function("balanced_loss_forward_backward_64x10", |b| {
        b.iter_batched(
            || {
                let g = Graph::new();
                let s = Tensor::param(&[rows, cols], student.clone()).unwrap();
                let t = Tensor::from_vec(&[rows, cols], teacher.clone()).unwrap();
                (g, s, t)
            },
            |(g, s, t)| {
                let pair = LogitBatch::new(s, t).unwrap();
                let loss = bdd_loss(&g, &pair, &cfg).unwrap();
                g.backward(&loss).unwrap();
                loss.item()
            },
            BatchSize::SmallInput,
        )
    });

    c.bench_function("accumulated_loss_forward_backward_64x10", |b| {
        b.iter_batched(
            || {
                let g = Graph::new();
                let s = Tensor::param(&[rows, cols], student.clone()).unwrap();
                let t = Tensor::from_vec(&[rows, cols], teacher.clone()).unwrap();
                (g, s, t)
            },
            |(g, s, t)| {
                let pair = LogitBatch::new(s, t).unwrap();
                let loss = bdd_loss_accumulated(&g, &pair, &cfg).unwrap();
                g.backward(&loss).unwrap();
                loss.item()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_segmentation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [4usize, 8, 16, 16];
    let n: usize = shape.iter().product();
    let cfg = DistillConfig::segmentation_default();
    let student = random_logits(&mut rng, n);
    let teacher = random_logits(&mut rng, n);

    c.bench_function("segmentation_loss_forward_backward_4x8x16x16", |b| {
        b.iter_batched(
            || {
                let g = Graph::new();
                let s = Tensor::param(&shape, student.clone()).unwrap();
                let t = Tensor::from_vec(&shape, teacher.clone()).unwrap();
                (g, s, t)
            },
            |(g, s, t)| {
                let pair = LogitBatch::new(s, t).unwrap();
                let loss = bdd_seg_loss(&g, &pair, &cfg).unwrap();
                g.backward(&loss).unwrap();
                loss.item()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_balanced, bench_segmentation);
criterion_main!(benches);
