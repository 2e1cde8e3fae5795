mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svcsel_core::simstudy::run_replicate;
use svcsel_core::*;

fn small_config() -> SimConfig {
    SimConfig {
        m: 7,
        true_mu: vec![2.0, 0.0, 1.0],
        true_gp: vec![GpParams::new(0.2, 0.5), GpParams::new(0.1, 0.0), GpParams::new(0.15, 0.3)],
        n_reps: 2,
        ..SimConfig::default()
    }
}

fn small_fit() -> (Dataset, FitResult) {
    let cfg = small_config();
    let (data, _) = generate_dataset(&cfg, 0).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(cfg.m));
    let mle = fit_mle(&data, &KernelSpec::exponential(), &AnisotropyMatrix::identity(2), &bounds, None).unwrap();
    (data, mle)
}

#[test]
fn mle_trace_is_monotone_and_beats_start() {
    let (_, mle) = small_fit();
    assert!(mle.converged);
    assert!(mle.iterations <= 20);
    assert_eq!(mle.trace.len(), mle.iterations + 1);
    for pair in mle.trace.windows(2) {
        assert!(pair[1].pen_loglik >= pair[0].pen_loglik - 1e-8, "{} then {}", pair[0].pen_loglik, pair[1].pen_loglik);
    }
    assert!((mle.loglik - mle.trace.last().unwrap().loglik).abs() < 1e-6);
}

#[test]
fn mle_is_a_local_maximum_in_the_covariance_block() {
    let (data, mle) = small_fit();
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let theta = mle.params.theta();
    let pen = PenaltyConfig::none(data.p(), data.q());
    let f0 = model.theta_objective(&theta, &mle.params.mu, &pen).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(7));
    for i in 0..theta.len() {
        for step in [-1e-3, 1e-3] {
            let mut t = theta.clone();
            t[i] = (t[i] + step * t[i].abs().max(1e-2)).clamp(bounds.lower[i], bounds.upper[i]);
            let f = model.theta_objective(&t, &mle.params.mu, &pen).unwrap();
            assert!(f >= f0 - 1e-6, "coordinate {i}: {f} < {f0}");
        }
    }
}

#[test]
fn mle_mean_is_gls_at_the_covariance_estimate() {
    let (data, mle) = small_fit();
    let s = assemble_sigma_y(&data, &mle.params, &KernelSpec::exponential(), &AnisotropyMatrix::identity(2)).unwrap();
    let mu = gls(&data.y, &data.x, &s).unwrap();
    for (a, b) in mu.iter().zip(&mle.params.mu) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn pmle_extremes() {
    let (data, mle) = small_fit();
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(7));
    let opts = FitOptions::default();

    let heavy = fit_pmle_with(&model, &bounds, (1e3, 1e3), &mle, &opts).unwrap();
    assert!(heavy.params.mu.iter().all(|m| *m == 0.0));
    assert!(heavy.params.gp.iter().all(|g| g.variance == 0.0));
    assert_eq!(heavy.nonzero_counts(), (0, 0));

    let light = fit_pmle_with(&model, &bounds, (1e-12, 1e-12), &mle, &opts).unwrap();
    assert!((light.loglik - mle.loglik).abs() < 1e-3 * mle.loglik.abs());
    assert_eq!(light.lambda, Some((1e-12, 1e-12)));
    let expected = bic(light.loglik, light.nonzero_counts().0, light.nonzero_counts().1, data.n());
    assert!((light.bic - expected).abs() < 1e-9);
}

#[test]
fn zero_mle_variance_stays_pinned() {
    let (data, mut mle) = small_fit();
    mle.params.gp[1].variance = 0.0;
    let weights = adaptive_weights(&mle);
    assert!(weights.weights_var[1].is_infinite());
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(7));
    let fit = fit_pmle_with(&model, &bounds, (1e-4, 1e-4), &mle, &FitOptions::default()).unwrap();
    assert_eq!(fit.params.gp[1].variance, 0.0);
}

#[test]
fn analytic_and_numeric_gradients_reach_similar_optima() {
    let cfg = small_config();
    let (data, _) = generate_dataset(&cfg, 1).unwrap();
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(cfg.m));
    let theta0 = default_theta_init(&data, &bounds);
    let analytic = fit_mle_with(&model, &bounds, &theta0, &FitOptions::default()).unwrap();
    let numeric = fit_mle_with(
        &model,
        &bounds,
        &theta0,
        &FitOptions {
            gradient: GradientMode::FiniteDifference,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!((analytic.loglik - numeric.loglik).abs() < 1e-2, "{} vs {}", analytic.loglik, numeric.loglik);
}

#[test]
fn tuning_is_deterministic_and_reports_the_minimum() {
    let (data, mle) = small_fit();
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let bounds = default_bounds(data.q(), grid_min_range(7));
    let cfg = TuneConfig {
        n_init: 5,
        n_iter: 3,
        seed: 9,
        ..TuneConfig::default()
    };
    let a = tune_shrinkage(&model, &bounds, &mle, &FitOptions::default(), &cfg).unwrap();
    let b = tune_shrinkage(&model, &bounds, &mle, &FitOptions::default(), &TuneConfig { parallel: false, ..cfg }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), 8);
    let min = a.trace.iter().map(|e| e.bic).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_bic, min);
    assert_eq!(a.trace[a.best_index].bic, min);
    assert_eq!(a.best_fit.lambda, Some(a.lambda_hat));
    for e in &a.trace {
        assert!(e.lambda_mu >= 1e-6 && e.lambda_mu <= 1.0);
        assert!(e.lambda_theta >= 1e-6 && e.lambda_theta <= 1.0);
    }
}

#[test]
fn covariate_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let x = sample_covariates(n, 4, 0.5, &mut rng).unwrap();
    let cov = x.transpose() * &x / n as f64;
    for j in 0..4 {
        assert!(x.column(j).mean().abs() < 0.03);
        for k in 0..4 {
            let expected = 0.5f64.powi((j as i32 - k as i32).abs());
            assert!((cov[(j, k)] - expected).abs() < 0.03, "{j},{k}: {}", cov[(j, k)]);
        }
    }
}

#[test]
fn gp_draw_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let locs = Locations::from_points(&[vec![0.1, 0.1], vec![0.2, 0.15], vec![0.8, 0.9]]).unwrap();
    let gp = GpParams::new(0.2, 0.7);
    let spec = KernelSpec::exponential();
    let aniso = AnisotropyMatrix::identity(2);
    let draws = 40_000;
    let mut acc = DMatrix::<f64>::zeros(3, 3);
    for _ in 0..draws {
        let v = sample_gp(&locs, &gp, &spec, &aniso, &mut rng).unwrap();
        acc += &v * v.transpose();
    }
    acc /= draws as f64;
    for i in 0..3 {
        for j in 0..3 {
            let d = distance(locs.point(i), locs.point(j), &aniso);
            let expected = 0.7 * (-d / 0.2).exp();
            assert!((acc[(i, j)] - expected).abs() < 0.03, "{i},{j}: {} vs {expected}", acc[(i, j)]);
        }
    }
}

#[test]
fn perturbed_grid_stays_in_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let locs = perturbed_grid(6, 0.1, &mut rng).unwrap();
    assert_eq!(locs.len(), 36);
    let mut seen = [[false; 6]; 6];
    for p in locs.iter() {
        let (i, j) = ((p[0] * 6.0) as usize, (p[1] * 6.0) as usize);
        assert!(!seen[i][j]);
        seen[i][j] = true;
        for (c, idx) in [(p[0], i), (p[1], j)] {
            let offset = c * 6.0 - idx as f64;
            assert!((0.1..=0.9).contains(&offset));
        }
    }
}

#[test]
fn replicate_rows_are_reproducible() {
    let cfg = small_config();
    let opts = StudyOptions {
        tune: TuneConfig {
            n_init: 4,
            n_iter: 2,
            ..TuneConfig::default()
        },
        parallel: false,
        ..StudyOptions::default()
    };
    let methods = [Method::Mle, Method::Pmle, Method::Oracle];
    let a = run_replicate(&cfg, 1, &methods, &opts);
    let b = run_replicate(&cfg, 1, &methods, &opts);
    assert_eq!(a, b);
    let rows: Vec<StudyRow> = a.into_iter().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let oracle = &rows[2];
    assert_eq!(oracle.method, Method::Oracle);
    // the oracle fits only the true support
    assert_eq!(oracle.params.mu[1], 0.0);
    assert_eq!(oracle.params.gp[1].variance, 0.0);
    assert_eq!(oracle.counts.c_fixed, 1);
    assert_eq!(oracle.counts.c_random, 1);
    for r in &rows {
        assert!(r.rme > 0.0 && r.rme < 1.0);
    }
}

#[test]
fn cross_validation_runs_for_every_method() {
    let cfg = small_config();
    let (data, _) = generate_dataset(&cfg, 0).unwrap();
    let opts = CvOptions {
        spec: KernelSpec::exponential(),
        aniso: AnisotropyMatrix::identity(2),
        min_range: default_min_range(&data.locations),
        fit: FitOptions::default(),
        tune: TuneConfig {
            n_init: 4,
            n_iter: 2,
            ..TuneConfig::default()
        },
        alasso: svcsel_core::predict::AlassoOptions {
            n_lambda: 20,
            inner_folds: 5,
            ..Default::default()
        },
        parallel: false,
    };
    for method in [CvMethod::Alasso, CvMethod::Mle, CvMethod::Pmle] {
        let res = kfold_cv(&data, 4, method, 11, &opts).unwrap();
        assert_eq!(res.folds.len(), 4);
        assert_eq!(res.n_failed, 0);
        assert!(res.mean_rmse.is_finite() && res.mean_rmse > 0.0);
        assert_eq!(res.folds.iter().map(|f| f.n_test).sum::<usize>(), data.n());
    }
}

#[test]
fn prediction_at_training_sites_smooths_toward_the_data() {
    let (data, mle) = small_fit();
    let pred = predict(
        &mle.params,
        &data,
        &KernelSpec::exponential(),
        &AnisotropyMatrix::identity(2),
        &data.locations,
        &data.x,
        &data.w,
    )
    .unwrap();
    let model = SvcModel::new(&data, KernelSpec::exponential(), AnisotropyMatrix::identity(2)).unwrap();
    let fitted = model.fitted_values(&mle.params).unwrap();
    assert!((&pred - &fitted).amax() < 1e-8);
    let linear = &data.x * DVector::from_column_slice(&mle.params.mu);
    assert!((&data.y - &pred).norm() < (&data.y - &linear).norm());
}
