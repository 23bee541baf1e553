use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metareg_core::sim::SimRng;
use metareg_core::{
    covariance, fit_meta_regression, reml_tau2, t_quantile, CovarianceVariant, DesignMatrix, RemlConfig,
};
use nalgebra::{DMatrix, DVector};

fn instance(k: usize) -> (DesignMatrix, DVector<f64>, DVector<f64>) {
    let mut rng = SimRng::seed_from_u64(k as u64);
    let x = DMatrix::from_fn(k, 3, |_, j| if j == 0 { 1.0 } else { rng.normal() });
    let y = DVector::from_fn(k, |_, _| rng.normal());
    let v = DVector::from_fn(k, |_, _| 0.05 + 0.2 * rng.uniform());
    (DesignMatrix::from_matrix(x).unwrap(), y, v)
}

fn reml(c: &mut Criterion) {
    let mut g = c.benchmark_group("reml");
    for k in [6, 20, 50] {
        let (d, y, v) = instance(k);
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| reml_tau2(black_box(&d), &y, &v, &RemlConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn sandwich(c: &mut Criterion) {
    let (d, y, v) = instance(20);
    let fit = fit_meta_regression(&d, &y, &v, &RemlConfig::default()).unwrap();
    let mut g = c.benchmark_group("covariance_k20");
    for variant in CovarianceVariant::ALL {
        g.bench_function(variant.name(), |b| {
            b.iter(|| covariance(black_box(&fit), variant, 0.7).unwrap())
        });
    }
    g.finish();
}

fn quantile(c: &mut Criterion) {
    c.bench_function("t_quantile_df3", |b| {
        b.iter(|| t_quantile(black_box(3), 0.975).unwrap())
    });
}

criterion_group!(benches, reml, sandwich, quantile);
criterion_main!(benches);
