//! Sequential against rayon execution for the data-parallel kernels.
//!
//! Built without the `parallel` feature only the sequential rows run.

use cin_core::data_synth::{generate_domain_pair_with, GeneratorConfig};
use cin_core::par::Exec;
use cin_core::tensor::kernels::{conv2d_forward, matmul_with, ConvGeom};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for size in [64usize, 256] {
        let a = random(size * size, 1);
        let b = random(size * size, 2);
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, size), &size, |bench, &s| {
                bench.iter(|| matmul_with(exec, black_box(&a), black_box(&b), s, s, s))
            });
        }
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    // One training batch through the first layer of the base network.
    let geom = ConvGeom {
        n: 32,
        c: 8,
        h: 16,
        w: 16,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    };
    let out_channels = 16;
    let x = random(geom.n * geom.c * geom.h * geom.w, 3);
    let k = random(out_channels * geom.patch_len(), 4);
    for (name, exec) in modes() {
        g.bench_function(name, |bench| {
            bench.iter(|| conv2d_forward(exec, black_box(&x), black_box(&k), out_channels, &geom))
        });
    }
    g.finish();
}

fn data_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_domain_pair");
    g.sample_size(10);
    let cfg = GeneratorConfig {
        n_source: 500,
        n_target: 500,
        ..GeneratorConfig::benchmark(0)
    };
    for (name, exec) in modes() {
        g.bench_function(name, |bench| {
            bench.iter(|| generate_domain_pair_with(black_box(&cfg), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, conv, data_generation);
criterion_main!(benches);
