use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sulreg::ransac::{compute_inliers, run_registration, RansacConfig};
use sulreg::synth::{synthesize_pair, SyntheticSpec};
use sulreg::with_workers;

// With the default features, "1" pins a single worker and "all" uses one per
// core. Run with --no-default-features to time the sequential build.
const POOLS: [(&str, usize); 2] = [("1", 1), ("all", 0)];

fn build() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

fn registration(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("registration/{}", build()));
    group.sample_size(10);
    for n in [500, 2000] {
        let pair = synthesize_pair(&SyntheticSpec {
            n_points: 4 * n,
            n_correspondences: n,
            outlier_rate: 0.8,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let cfg = RansacConfig::default();
        for (label, workers) in POOLS {
            group.bench_with_input(BenchmarkId::new(format!("workers={label}"), n), &pair, |b, pair| {
                b.iter(|| {
                    with_workers(workers, || {
                        run_registration(&pair.correspondences, &pair.source, &pair.target, &cfg).unwrap()
                    })
                })
            });
        }
    }
    group.finish();
}

fn inlier_count(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("inliers/{}", build()));
    let pair = synthesize_pair(&SyntheticSpec {
        n_points: 200_000,
        n_correspondences: 100_000,
        outlier_rate: 0.5,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    for (label, workers) in POOLS {
        group.bench_function(format!("workers={label}"), |b| {
            b.iter(|| with_workers(workers, || compute_inliers(&pair.gt, &pair.correspondences, 0.01).len()))
        });
    }
    group.finish();
}

criterion_group!(benches, registration, inlier_count);
criterion_main!(benches);
