use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use svcsel_bench::{dataset, regression, truth};
use svcsel_core::lasso::{weighted_lasso, whiten};
use svcsel_core::linalg::Cholesky;
use svcsel_core::{AnisotropyMatrix, KernelSpec, PenaltyConfig, SvcModel};

fn likelihood(c: &mut Criterion) {
    let mut group = c.benchmark_group("likelihood");
    group.sample_size(20);
    let params = truth();
    let theta = params.theta();
    for m in [8, 12, 15] {
        let data = dataset(m);
        let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
        let pen = PenaltyConfig::none(data.p(), data.q());
        group.bench_with_input(BenchmarkId::new("value", m * m), &m, |b, _| {
            b.iter(|| model.theta_objective(black_box(&theta), &params.mu, &pen).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("value_and_gradient", m * m), &m, |b, _| {
            b.iter(|| model.theta_objective_with_gradient(black_box(&theta), &params.mu, &pen).unwrap())
        });
    }
    group.finish();
}

fn cholesky(c: &mut Criterion) {
    let mut group = c.benchmark_group("cholesky");
    let params = truth();
    for m in [8, 12, 15] {
        let data = dataset(m);
        let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
        let sigma = model.sigma_y(&params.theta()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m * m), &sigma, |b, s| {
            b.iter(|| Cholesky::factor(black_box(s), 0.0).unwrap())
        });
    }
    group.finish();
}

fn lasso(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_lasso");
    for (n, p) in [(100, 8), (225, 8), (225, 32)] {
        let (y, x) = regression(n, p);
        let w = whiten(&y, &x, &nalgebra::DMatrix::identity(n, n)).unwrap();
        let lambdas = vec![0.05; p];
        let start = vec![0.0; p];
        group.bench_function(BenchmarkId::from_parameter(format!("{n}x{p}")), |b| {
            b.iter(|| weighted_lasso(black_box(&w.y_tilde), &w.x_tilde, &lambdas, &start).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, likelihood, cholesky, lasso);
criterion_main!(benches);
