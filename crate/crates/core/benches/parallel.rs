//! Sequential vs rayon execution of the data-parallel kernels.
//! Both paths produce bitwise-identical results; only wall time differs.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcl_core::encoders::{Architecture, EncoderPair};
use tcl_core::numgrad::kernels::matmul;
use tcl_core::par::{set_force_sequential, Exec};
use tcl_core::synthdata::{augment_batch, generate_suite, Layout, Suite, ViewRole};
use tcl_core::trainer::evaluate;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (160, 256, 128);
    let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.01).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.02).collect();
    let mut group = c.benchmark_group("matmul_160x256x128");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| matmul(black_box(&a), black_box(&b), m, k, n, exec))
        });
    }
    group.finish();
}

fn bench_augment(c: &mut Criterion) {
    let data = generate_suite(Suite::Digits5, 160, 0).remove(2);
    let idx: Vec<usize> = (0..160).collect();
    let layout = Layout::Raster { width: 16, height: 16 };
    let mut group = c.benchmark_group("augment_batch_160");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| augment_batch(&data, &idx, layout, ViewRole::Target, |r| r as u64, exec))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let data = generate_suite(Suite::Digits5, 1000, 0).remove(2);
    let pair = EncoderPair::new(Architecture::new(data.dim, 32, 10), 0.99, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut group = c.benchmark_group("evaluate_1000");
    for (name, sequential) in [("sequential", true), ("parallel", false)] {
        set_force_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| evaluate(&pair, &data).unwrap()));
    }
    set_force_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_augment, bench_evaluate);
criterion_main!(benches);
