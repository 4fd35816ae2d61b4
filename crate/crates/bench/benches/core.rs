//! Benchmarks for the numerical hot paths: chart fitting, witness angles,
//! occupancy metrics, coupling statistics, and atlas assignment.
//!
//! Sizes mirror a typical site: a few hundred rows, ambient dimension in
//! the tens. Resampling counts are scaled down — the benches track per-draw
//! cost, which is what tuning changes.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use chartwit_core::stats::{BootstrapConfig, CouplingConfig, PermutationConfig};
use chartwit_core::{
    assign_rows, auc, couple, energy_distance_norm, estimate_tangent, occ_w2_sq_norm,
    project_into_chart, substream_rng, witness_q, ActivationTable, ChartConfig, FrozenAtlas,
    RowMeta, Site, Span, Surface,
};

fn gaussian(n: usize, d: usize, stream: u64) -> DMatrix<f64> {
    let mut rng = substream_rng(17, stream);
    DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

fn site(layer: u32) -> Site {
    Site::new(layer, Span::Reason, Surface::Delta)
}

fn bench_tangent(c: &mut Criterion) {
    let points = gaussian(512, 64, 1);
    let config = ChartConfig::default();
    c.bench_function("tangent/estimate_512x64", |b| {
        b.iter(|| estimate_tangent(black_box(&points), site(0), &config).unwrap())
    });
}

fn bench_witness(c: &mut Criterion) {
    let config = ChartConfig::default();
    let frozen_points = gaussian(512, 64, 2);
    let cand_points = gaussian(512, 64, 3);
    let frozen = estimate_tangent(&frozen_points, site(0), &config).unwrap();
    let candidate = estimate_tangent(&cand_points, site(1), &config).unwrap();
    c.bench_function("witness/q_512x64", |b| {
        b.iter(|| witness_q(&frozen, &candidate, black_box(&cand_points)).unwrap())
    });
}

fn bench_occupancy(c: &mut Criterion) {
    let config = ChartConfig::default();
    let points_x = gaussian(512, 64, 4);
    let points_y = gaussian(512, 64, 5);
    let chart = estimate_tangent(&points_x, site(0), &config).unwrap();
    let x = project_into_chart(&points_x, &chart).unwrap();
    let y = project_into_chart(&points_y, &chart).unwrap();
    c.bench_function("occupancy/w2_512", |b| {
        b.iter(|| occ_w2_sq_norm(black_box(&x), black_box(&y)).unwrap())
    });
    c.bench_function("occupancy/energy_512", |b| {
        b.iter(|| energy_distance_norm(black_box(&x), black_box(&y)).unwrap())
    });
}

fn bench_coupling(c: &mut Criterion) {
    let mut rng = substream_rng(17, 6);
    let pos: Vec<f64> = (0..256)
        .map(|_| rng.sample::<f64, _>(StandardNormal) + 1.0)
        .collect();
    let neg: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
    c.bench_function("coupling/auc_256", |b| {
        b.iter(|| auc(black_box(&pos), black_box(&neg)).unwrap())
    });
    let config = CouplingConfig {
        bootstrap: BootstrapConfig {
            replicates: 1_000,
            alpha: 0.05,
        },
        permutation: PermutationConfig {
            permutations: 999,
            exhaustive_limit: 20_000,
        },
    };
    c.bench_function("coupling/couple_256_1k", |b| {
        b.iter(|| couple(black_box(&pos), black_box(&neg), 17, &config).unwrap())
    });
}

fn bench_assignment(c: &mut Criterion) {
    let config = ChartConfig::default();
    let charts: Vec<_> = (0..4)
        .map(|i| {
            let mut points = gaussian(256, 64, 10 + i as u64);
            points.column_mut(0).add_scalar_mut(4.0 * i as f64);
            estimate_tangent(&points, site(i), &config).unwrap()
        })
        .collect();
    let atlas = FrozenAtlas::new(charts).unwrap();
    let data = gaussian(2_048, 64, 20);
    let meta: Vec<RowMeta> = (0..data.nrows())
        .map(|i| RowMeta::bare(format!("r{i}"), "on", 0, Span::Reason, Surface::Delta))
        .collect();
    let table = ActivationTable::new(data, meta).unwrap();
    c.bench_function("bridge/assign_2048x64", |b| {
        b.iter(|| assign_rows(black_box(&atlas), &table).unwrap())
    });
}

criterion_group!(
    benches,
    bench_tangent,
    bench_witness,
    bench_occupancy,
    bench_coupling,
    bench_assignment
);
criterion_main!(benches);
