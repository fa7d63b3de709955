use criterion::{criterion_group, criterion_main, Criterion};
use textped_bench::{keypoints, rng};
use rand::Rng;
use textped_core::metrics::{inception_score, pose_score, pose_variance, DEFAULT_B_MAX};

fn pose(c: &mut Criterion) {
    let sets = keypoints(5000, 0);
    c.bench_function("pose_score/5000", |b| b.iter(|| pose_score(&sets).unwrap()));
    c.bench_function("pose_variance/5000", |b| b.iter(|| pose_variance(&sets, DEFAULT_B_MAX).unwrap()));
}

fn inception(c: &mut Criterion) {
    let mut r = rng(1);
    let probs: Vec<Vec<f64>> = (0..5000)
        .map(|_| {
            let raw: Vec<f64> = (0..100).map(|_| r.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    c.bench_function("inception_score/5000x100", |b| b.iter(|| inception_score(&probs, 10).unwrap()));
}

criterion_group!(benches, pose, inception);
criterion_main!(benches);
