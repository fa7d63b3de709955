use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use candle_core::DType;
use textped_bench::normal;
use textped_core::attention::{AttentionMode, ScaAttention, VisaAttention};
use textped_core::nn::ParamStore;

fn visa(c: &mut Criterion) {
    let mut group = c.benchmark_group("visa");
    for side in [8usize, 16, 32] {
        let mut store = ParamStore::new(0, DType::F32);
        let attn = VisaAttention::new(&mut store.root(), 32, 16).unwrap();
        let rho = normal(1, &[4, 16, side, side]);
        let words = normal(2, &[4, 32, 18]);
        group.bench_with_input(BenchmarkId::from_parameter(side * side), &side, |b, _| {
            b.iter(|| attn.forward(&rho, &words, None, AttentionMode::Learned).unwrap())
        });
    }
    group.finish();
}

fn sca(c: &mut Criterion) {
    let mut group = c.benchmark_group("sca");
    for side in [4usize, 8, 16] {
        let mut store = ParamStore::new(0, DType::F32);
        let attn = ScaAttention::new(&mut store.root(), 16, 64).unwrap();
        let rho = normal(1, &[4, 16, side, side]);
        let s = normal(2, &[4, 64]);
        group.bench_with_input(BenchmarkId::from_parameter(side * side), &side, |b, _| {
            b.iter(|| attn.forward(&rho, &s).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, visa, sca);
criterion_main!(benches);
