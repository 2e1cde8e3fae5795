mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svcsel_core::lasso::{kkt_residual, lasso_objective, soft_threshold};
use svcsel_core::mbo::latin_hypercube_unit;
use svcsel_core::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loglik_invariant_under_row_permutation(seed in any::<u64>(), n in 3usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, 2, 2, true);
        let ll = log_likelihood(&inst.data, &inst.params, &inst.spec, &inst.aniso).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled = inst.data.subset_rows(&perm).unwrap();
        let ll2 = log_likelihood(&shuffled, &inst.params, &inst.spec, &inst.aniso).unwrap();
        prop_assert!((ll - ll2).abs() <= 1e-9 * ll.abs().max(1.0));
    }

    #[test]
    fn sigma_y_matches_definition(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, 1, 3, true);
        let s = assemble_sigma_y(&inst.data, &inst.params, &inst.spec, &inst.aniso).unwrap();
        let oracle = sigma_y(&inst.data, &inst.params, &inst.spec, &inst.aniso);
        prop_assert!((&s - &oracle).amax() <= 1e-12 * oracle.amax());
        prop_assert!((&s - s.transpose()).amax() == 0.0);
    }

    #[test]
    fn penalized_loglik_subtracts_scaled_penalty(seed in any::<u64>(), lm in 0.0f64..1.0, lt in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 8, 3, 2, true);
        let pen = PenaltyConfig { lambda_mu: lm, lambda_theta: lt, weights_mu: vec![1.0, 2.0, 0.5], weights_var: vec![3.0, 1.0] };
        let ll = log_likelihood(&inst.data, &inst.params, &inst.spec, &inst.aniso).unwrap();
        let pll = penalized_log_likelihood(&inst.data, &inst.params, &pen, &inst.spec, &inst.aniso).unwrap();
        let p = &inst.params;
        let expected = ll
            - 8.0 * (lm * (p.mu[0].abs() + 2.0 * p.mu[1].abs() + 0.5 * p.mu[2].abs())
                + lt * (3.0 * p.gp[0].variance + p.gp[1].variance));
        prop_assert!((pll - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn soft_threshold_is_prox_of_abs(z in -10.0f64..10.0, t in 0.0f64..5.0, probe in -10.0f64..10.0) {
        let s = soft_threshold(z, t);
        let obj = |v: f64| 0.5 * (v - z) * (v - z) + t * v.abs();
        prop_assert!(obj(s) <= obj(probe) + 1e-12);
        prop_assert!(s.abs() <= z.abs());
    }

    #[test]
    fn lasso_solution_is_optimal(seed in any::<u64>(), n in 5usize..30, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| normal(&mut rng));
        let lambdas: Vec<f64> = (0..p).map(|j| 0.05 * j as f64).collect();
        let mu = weighted_lasso(&y, &x, &lambdas, &vec![0.0; p]).unwrap();
        prop_assert!(kkt_residual(&y, &x, &lambdas, &mu) <= 1e-7);
        let best = lasso_objective(&y, &x, &lambdas, &mu);
        for j in 0..p {
            for d in [-1e-3, 1e-3] {
                let mut other = mu.clone();
                other[j] += d;
                prop_assert!(best <= lasso_objective(&y, &x, &lambdas, &other) + 1e-12);
            }
        }
    }

    #[test]
    fn larger_penalty_never_grows_the_l1_norm(seed in any::<u64>(), lam in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(20, 4, |_, _| normal(&mut rng));
        let y = DVector::from_fn(20, |_, _| normal(&mut rng));
        let small = weighted_lasso(&y, &x, &[lam; 4], &[0.0; 4]).unwrap();
        let large = weighted_lasso(&y, &x, &[lam + 0.2; 4], &[0.0; 4]).unwrap();
        let l1 = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>();
        prop_assert!(l1(&large) <= l1(&small) + 1e-8);
    }

    #[test]
    fn box_minimizer_of_separable_quadratic_is_clamped_center(
        centers in prop::collection::vec(-3.0f64..3.0, 1..6),
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let m = centers.len();
        let bounds = BoxBounds::new(vec![-1.0; m], vec![1.0; m]).unwrap();
        let fg = |x: &[f64]| -> svcsel_core::Result<(f64, Vec<f64>)> {
            let f = (0..m).map(|i| 0.5 * scales[i] * (x[i] - centers[i]).powi(2)).sum();
            let g = (0..m).map(|i| scales[i] * (x[i] - centers[i])).collect();
            Ok((f, g))
        };
        let rep = minimize_box(fg, &vec![0.0; m], &bounds, &OptimOptions::default()).unwrap();
        for i in 0..m {
            prop_assert!((rep.x_star[i] - centers[i].clamp(-1.0, 1.0)).abs() <= 1e-6);
        }
    }

    #[test]
    fn latin_hypercube_has_one_point_per_stratum(seed in any::<u64>(), n in 1usize..30, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = latin_hypercube_unit(n, d, &mut rng);
        prop_assert_eq!(pts.len(), n);
        for j in 0..d {
            let mut seen = vec![false; n];
            for p in &pts {
                let s = ((p[j] * n as f64).floor() as usize).min(n - 1);
                prop_assert!(!seen[s]);
                seen[s] = true;
            }
        }
    }

    #[test]
    fn fold_plan_partitions(n in 2usize..400, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = FoldPlan::new(n, k, seed).unwrap();
        let sizes = plan.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let test = plan.test_indices(f);
            let train = plan.train_indices(f);
            prop_assert_eq!(test.len() + train.len(), n);
            prop_assert!(test.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn bic_grows_with_model_size(ll in -1000.0f64..0.0, a in 0usize..10, b in 0usize..10, n in 2usize..1000) {
        prop_assert!(bic(ll, a + 1, b, n) > bic(ll, a, b, n));
        prop_assert!(bic(ll, a, b + 1, n) > bic(ll, a, b, n));
        prop_assert!((bic(ll, a, b, n) - (-2.0 * ll + (n as f64).ln() * (a + b) as f64)).abs() < 1e-9);
    }

    #[test]
    fn expected_improvement_is_monotone(mean in -5.0f64..5.0, sd in 0.01f64..3.0, xi in -5.0f64..5.0) {
        let ei = expected_improvement(mean, sd, xi);
        prop_assert!(ei >= 0.0);
        prop_assert!(ei >= (xi - mean).max(0.0) - 1e-12);
        prop_assert!(expected_improvement(mean, sd * 1.5, xi) >= ei - 1e-12);
        prop_assert!(expected_improvement(mean - 0.1, sd, xi) >= ei - 1e-12);
    }

    #[test]
    fn selection_counts_are_bounded(zero_mask in prop::collection::vec(any::<bool>(), 16)) {
        let cfg = SimConfig::default();
        let truth = cfg.truth();
        let mut est = truth.clone();
        for j in 0..8 {
            est.mu[j] = if zero_mask[j] { 0.0 } else { 1.0 };
            est.gp[j].variance = if zero_mask[8 + j] { 0.0 } else { 1.0 };
        }
        let c = selection_counts(&est, &truth).unwrap();
        prop_assert!(c.c_fixed <= 4 && c.ic_fixed <= 4 && c.c_random <= 4 && c.ic_random <= 4);
        let zeros = zero_mask.iter().filter(|z| **z).count();
        prop_assert_eq!(c.c_fixed + c.ic_fixed + c.c_random + c.ic_random, zeros);
    }
}
