//! Rayon fan-out against the sequential fallback on the three hot paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdfce_core::channel::{generate_dataset, SystemConfig};
use mdfce_core::net::{Dims, MdfceModel, ModelConfig, NormStats, Variant};
use mdfce_core::par;
use mdfce_core::tensor::{Graph, Tensor};
use mdfce_core::train::{evaluate, Density, Method};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn run<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    if sequential {
        par::with_sequential(f)
    } else {
        f()
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[512, 256], &mut rng);
    let b = Tensor::randn(&[256, 256], &mut rng);
    let mut group = c.benchmark_group("matmul_512x256x256");
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                run(seq, || {
                    let mut g = Graph::new();
                    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                    black_box(g.matmul(x, y).unwrap());
                })
            })
        });
    }
    group.finish();
}

fn dataset(c: &mut Criterion) {
    let sys = SystemConfig::desk();
    let mut group = c.benchmark_group("generate_256_desk_samples");
    group.sample_size(10);
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| run(seq, || black_box(generate_dataset(&sys, 0, 256))))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let sys = SystemConfig::desk();
    let data = generate_dataset(&sys, 0, 128);
    let d = Dims::new(&sys);
    let norm = NormStats::identity(d.tokens_in * d.feat_in, d.tokens_out * d.feat_out);
    let model = MdfceModel::new(ModelConfig::desk(), sys.clone(), Variant::Full, norm, 0).unwrap();
    let quarter = Density::new(1, 4).unwrap();
    let methods = [
        Method::Mdfce {
            name: "mdfce".into(),
            model: &model,
            input_density: quarter,
        },
        Method::Ls { density: quarter },
    ];
    let mut group = c.benchmark_group("evaluate_128_samples_2_snrs");
    group.sample_size(10);
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| run(seq, || black_box(evaluate(&sys, &methods, &data, &[10.0, 20.0], 3).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, dataset, evaluation);
criterion_main!(benches);
