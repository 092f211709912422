//! Single-thread pool versus the default pool over the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pachubert_core::dsp::{istft, stft};
use pachubert_core::labels::{kmeans_assign, kmeans_fit, KMeansOptions};
use pachubert_core::par;
use pachubert_core::primitives::{extract_all, PrimitiveConfig};
use pachubert_core::synth::synth_song;
use rand::{Rng, SeedableRng};

fn modes() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", 0)]
}

fn bench_stft(c: &mut Criterion) {
    let clip = synth_song(1, 0, 132_300, 44_100).mixture;
    let mut g = c.benchmark_group("stft_3s");
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("forward_inverse", name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let spec = stft(&clip, 2048, 441, Some(320)).unwrap();
                    istft(&spec, clip.len()).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn bench_primitives(c: &mut Criterion) {
    let clip = synth_song(2, 0, 132_300, 44_100).mixture;
    let spec = stft(&clip, 2048, 441, Some(320)).unwrap();
    let cfg = PrimitiveConfig::default();
    let mut g = c.benchmark_group("primitives_3s");
    g.sample_size(10);
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("extract_all", name), |b| {
            b.iter(|| par::with_threads(threads, || extract_all(&spec, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = ndarray::Array2::from_shape_fn((4000, 48), |_| rng.gen_range(0.0f32..1.0));
    let (model, _) = kmeans_fit(x.view(), &KMeansOptions { max_iters: 5, ..KMeansOptions::new(64, 0) }).unwrap();
    let mut g = c.benchmark_group("kmeans");
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("assign_4000x48_k64", name), |b| {
            b.iter(|| par::with_threads(threads, || kmeans_assign(&model, x.view()).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_stft, bench_primitives, bench_kmeans);
criterion_main!(benches);
