//! Maximum likelihood and penalized maximum likelihood estimation by
//! alternating a mean step (GLS or weighted lasso on the whitened problem) with
//! a box-constrained covariance step.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::kernels::{AnisotropyMatrix, GpParams, KernelSpec, Locations};
use crate::lasso::{self, LassoOptions};
use crate::mbo::bic;
use crate::model::{CdStep, Dataset, FitResult, PenaltyConfig, SvcModel, SvcParams};
use crate::optim::{fd_gradient, minimize_box, BoxBounds, OptimOptions};

/// Lower bound on the nugget.
pub const MIN_NUGGET: f64 = 1e-4;

/// Estimates with magnitude below this get an infinite adaptive weight.
pub const WEIGHT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    /// Relative change threshold on θ.
    pub delta: f64,
    pub t_max: usize,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig { delta: 1e-6, t_max: 20 }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || self.t_max == 0 {
            return Err(SvcError::invalid("delta must be positive and t_max at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences, for testing.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub cd: CdConfig,
    pub optim: OptimOptions,
    pub lasso: LassoOptions,
    pub gradient: GradientMode,
}

/// Box for θ in the order (ρ₁, σ₁², …, ρ_q, σ_q², τ²): ρ ≥ `min_range`,
/// σ² ≥ 0, τ² ≥ 1e-4, no upper bounds.
pub fn default_bounds(q: usize, min_range: f64) -> BoxBounds {
    let mut lower = Vec::with_capacity(2 * q + 1);
    for _ in 0..q {
        lower.push(min_range);
        lower.push(0.0);
    }
    lower.push(MIN_NUGGET);
    let upper = vec![f64::INFINITY; lower.len()];
    BoxBounds { lower, upper }
}

/// Range lower bound for an `m × m` grid on the unit square.
pub fn grid_min_range(m: usize) -> f64 {
    1.0 / (3.0 * m as f64)
}

/// Range lower bound for arbitrary locations: a third of the mean nearest-neighbour distance.
pub fn default_min_range(locs: &Locations) -> f64 {
    let d = locs.mean_nearest_neighbor() / 3.0;
    if d > 0.0 && d.is_finite() {
        d
    } else {
        1e-8
    }
}

/// Starting θ: ranges a quarter of the domain diameter, all variances and the
/// nugget `var(y) / (q + 1)`; projected onto `bounds`.
pub fn default_theta_init(data: &Dataset, bounds: &BoxBounds) -> Vec<f64> {
    let q = data.q();
    let n = data.n() as f64;
    let mean = data.y.mean();
    let var = if data.n() > 1 {
        data.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        1.0
    };
    let var = if var > 0.0 { var } else { 1.0 };
    let range = data.locations.diameter() / 4.0;
    let range = if range > 0.0 { range } else { 1.0 };
    let mut theta = Vec::with_capacity(2 * q + 1);
    for _ in 0..q {
        theta.push(range);
        theta.push(var / (q as f64 + 1.0));
    }
    theta.push(var / (q as f64 + 1.0));
    bounds.project(&mut theta);
    theta
}

/// `(‖μ‖₀, ‖σ²‖₀)` counting literal zeros only.
pub fn count_nonzero(params: &SvcParams) -> (usize, usize) {
    (
        params.mu.iter().filter(|m| **m != 0.0).count(),
        params.gp.iter().filter(|g| g.variance != 0.0).count(),
    )
}

/// Adaptive weights `1/|μ̂_j|` and `1/σ̂_k²` from an MLE; tiny estimates pin the coordinate.
pub fn adaptive_weights(mle: &FitResult) -> PenaltyConfig {
    let inv = |v: f64| if v.abs() < WEIGHT_EPS { f64::INFINITY } else { 1.0 / v.abs() };
    PenaltyConfig {
        lambda_mu: 0.0,
        lambda_theta: 0.0,
        weights_mu: mle.params.mu.iter().map(|&m| inv(m)).collect(),
        weights_var: mle.params.gp.iter().map(|g| inv(g.variance)).collect(),
    }
}

/// Maximum likelihood estimate with default bounds and initialization.
pub fn fit_mle(
    data: &Dataset,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
    bounds: &BoxBounds,
    theta_init: Option<&[f64]>,
) -> Result<FitResult> {
    let model = SvcModel::new(data, *spec, aniso.clone())?;
    let theta0 = match theta_init {
        Some(t) => t.to_vec(),
        None => default_theta_init(data, bounds),
    };
    fit_mle_with(&model, bounds, &theta0, &FitOptions::default())
}

pub fn fit_mle_with(model: &SvcModel<'_>, bounds: &BoxBounds, theta0: &[f64], opts: &FitOptions) -> Result<FitResult> {
    let pen = PenaltyConfig::none(model.p(), model.q());
    let start = MeanStart::Gls;
    coordinate_descent(model, bounds, theta0, start, &pen, None, opts)
}

/// Penalized fit at `lambda = (λ_μ, λ_θ)`, started from and weighted by `mle`.
pub fn fit_pmle(
    data: &Dataset,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
    bounds: &BoxBounds,
    lambda: (f64, f64),
    mle: &FitResult,
    cd: &CdConfig,
) -> Result<FitResult> {
    let model = SvcModel::new(data, *spec, aniso.clone())?;
    let opts = FitOptions { cd: *cd, ..FitOptions::default() };
    fit_pmle_with(&model, bounds, lambda, mle, &opts)
}

pub fn fit_pmle_with(
    model: &SvcModel<'_>,
    bounds: &BoxBounds,
    lambda: (f64, f64),
    mle: &FitResult,
    opts: &FitOptions,
) -> Result<FitResult> {
    let weights = adaptive_weights(mle);
    fit_penalized_with(model, bounds, lambda, &weights, mle, opts)
}

/// Penalized fit with caller-supplied weights (λ fields of `weights` are ignored).
pub fn fit_penalized_with(
    model: &SvcModel<'_>,
    bounds: &BoxBounds,
    lambda: (f64, f64),
    weights: &PenaltyConfig,
    init: &FitResult,
    opts: &FitOptions,
) -> Result<FitResult> {
    if !(lambda.0 >= 0.0 && lambda.1 >= 0.0) {
        return Err(SvcError::invalid("shrinkage parameters must be nonnegative"));
    }
    init.params.validate(model.p(), model.q())?;
    let pen = PenaltyConfig {
        lambda_mu: lambda.0,
        lambda_theta: lambda.1,
        ..weights.clone()
    };
    let q = model.q();
    let mut bounds = bounds.clone();
    let mut theta0 = init.params.theta();
    for k in 0..q {
        if pen.var_pinned(k) {
            theta0[2 * k + 1] = 0.0;
            bounds.upper[2 * k + 1] = 0.0;
        }
    }
    bounds.project(&mut theta0);
    let mut mu0 = init.params.mu.clone();
    for (j, m) in mu0.iter_mut().enumerate() {
        if pen.mu_penalty(j).is_infinite() {
            *m = 0.0;
        }
    }
    let mut fit = coordinate_descent(model, &bounds, &theta0, MeanStart::Given(mu0), &pen, Some(lambda), opts)?;
    fit.lambda = Some(lambda);
    Ok(fit)
}

enum MeanStart {
    Gls,
    Given(Vec<f64>),
}

fn coordinate_descent(
    model: &SvcModel<'_>,
    bounds: &BoxBounds,
    theta0: &[f64],
    start: MeanStart,
    pen: &PenaltyConfig,
    lambda: Option<(f64, f64)>,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.cd.validate()?;
    if bounds.len() != model.theta_len() {
        return Err(SvcError::invalid("bounds do not match the number of covariance parameters"));
    }
    if !bounds.contains(theta0) {
        return Err(SvcError::invalid("initial covariance parameters violate the bounds"));
    }
    let penalized = lambda.is_some();
    let mut have_mean = matches!(start, MeanStart::Gls);
    let wrap = |iteration: usize| move |e: SvcError| SvcError::CoordinateDescent { iteration, source: Box::new(e) };

    let mut theta = theta0.to_vec();
    let mut mu = match start {
        MeanStart::Gls => mean_step(model, &theta, None, pen, opts).map_err(wrap(0))?,
        MeanStart::Given(m) => m,
    };
    let record = |mu: &[f64], theta: &[f64], t: usize| -> Result<CdStep> {
        let params = SvcParams::from_theta(mu.to_vec(), theta)?;
        let loglik = model.log_likelihood(&params)?;
        let pen_loglik = loglik - model.penalty(&params, pen)?;
        Ok(CdStep {
            iteration: t,
            mu: mu.to_vec(),
            theta: theta.to_vec(),
            loglik,
            pen_loglik,
        })
    };
    let mut trace = vec![record(&mu, &theta, 0).map_err(wrap(0))?];
    let mut converged = false;
    let mut evaluations = 0;
    let mut t = 0;
    while t < opts.cd.t_max {
        t += 1;
        if !have_mean {
            mu = mean_step(model, &theta, Some(&mu), pen, opts).map_err(wrap(t))?;
        }
        have_mean = false;
        let (next, evals) = theta_step(model, bounds, &theta, &mu, pen, opts).map_err(wrap(t))?;
        evaluations += evals;
        let diff: f64 = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).sum();
        let base: f64 = theta.iter().map(|v| v.abs()).sum();
        theta = next;
        trace.push(record(&mu, &theta, t).map_err(wrap(t))?);
        if diff / base < opts.cd.delta {
            converged = true;
            break;
        }
    }
    if !penalized {
        // the returned mean is the GLS estimate at the final θ
        mu = mean_step(model, &theta, Some(&mu), pen, opts).map_err(wrap(t))?;
    }
    let params = SvcParams::from_theta(mu, &theta)?;
    let loglik = model.log_likelihood(&params)?;
    let pen_loglik = loglik - model.penalty(&params, pen)?;
    let (k_mu, k_var) = count_nonzero(&params);
    Ok(FitResult {
        params,
        loglik,
        pen_loglik,
        bic: bic(loglik, k_mu, k_var, model.n()),
        n: model.n(),
        lambda,
        trace,
        iterations: t,
        converged,
        evaluations,
    })
}

fn mean_step(
    model: &SvcModel<'_>,
    theta: &[f64],
    warm: Option<&[f64]>,
    pen: &PenaltyConfig,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let p = model.p();
    if p == 0 {
        return Ok(Vec::new());
    }
    let chol = model.factor(theta)?;
    let data = model.data();
    let wp = lasso::whiten_with(chol, &data.y, &data.x)?;
    let lambdas = pen.mu_penalties();
    if lambdas.iter().all(|l| *l == 0.0) {
        return lasso::least_squares(&wp.y_tilde, &wp.x_tilde);
    }
    let init = warm.map(|m| m.to_vec()).unwrap_or_else(|| vec![0.0; p]);
    Ok(lasso::weighted_lasso_with(&wp.y_tilde, &wp.x_tilde, &lambdas, &init, &opts.lasso)?.mu)
}

fn theta_step(
    model: &SvcModel<'_>,
    bounds: &BoxBounds,
    theta: &[f64],
    mu: &[f64],
    pen: &PenaltyConfig,
    opts: &FitOptions,
) -> Result<(Vec<f64>, usize)> {
    let report = match opts.gradient {
        GradientMode::Analytic => minimize_box(
            |th: &[f64]| model.theta_objective_with_gradient(th, mu, pen),
            theta,
            bounds,
            &opts.optim,
        )?,
        GradientMode::FiniteDifference => minimize_box(
            |th: &[f64]| {
                let f = model.theta_objective(th, mu, pen)?;
                let g = fd_gradient(|x| model.theta_objective(x, mu, pen), th, Some(bounds))?;
                Ok((f, g))
            },
            theta,
            bounds,
            &opts.optim,
        )?,
    };
    log::trace!("covariance step: {:?} after {} evaluations", report.termination, report.n_evals);
    Ok((report.x_star, report.n_evals))
}

/// Embed a fit on a column subset back into the full parameter layout.
///
/// Dropped fixed effects and variances are set to zero; dropped ranges take `fill_range`.
pub fn embed_params(sub: &SvcParams, fixed: &[usize], svc: &[usize], p: usize, q: usize, fill_range: f64) -> SvcParams {
    let mut mu = vec![0.0; p];
    for (&j, &m) in fixed.iter().zip(&sub.mu) {
        mu[j] = m;
    }
    let mut gp = vec![GpParams::new(fill_range, 0.0); q];
    for (&k, g) in svc.iter().zip(&sub.gp) {
        gp[k] = *g;
    }
    SvcParams::new(mu, gp, sub.nugget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn nugget_only(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let pts: Vec<f64> = (0..n).flat_map(|i| [i as f64 / n as f64, 0.0]).collect();
        Dataset::new(y, x, DMatrix::zeros(n, 0), Locations::new(2, pts).unwrap()).unwrap()
    }

    #[test]
    fn nugget_only_mle_is_ols() {
        let data = nugget_only(3, 40);
        let bounds = default_bounds(0, 0.01);
        let fit = fit_mle(&data, &KernelSpec::exponential(), &AnisotropyMatrix::identity(2), &bounds, None).unwrap();
        let ols = lasso::least_squares(&data.y, &data.x).unwrap();
        for (a, b) in fit.params.mu.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-9);
        }
        let r = &data.y - &data.x * DVector::from_vec(ols);
        let tau = r.norm_squared() / 40.0;
        assert!((fit.params.nugget - tau).abs() < 1e-6 * tau, "{} vs {}", fit.params.nugget, tau);
        assert!(fit.converged);
    }

    #[test]
    fn weights_are_reciprocals() {
        let fit = FitResult {
            params: SvcParams::new(vec![3.0, 1.5, 0.0], vec![GpParams::new(0.2, 0.0), GpParams::new(0.1, 0.5)], 0.1),
            loglik: 0.0,
            pen_loglik: 0.0,
            bic: 0.0,
            n: 1,
            lambda: None,
            trace: vec![],
            iterations: 0,
            converged: true,
            evaluations: 0,
        };
        let w = adaptive_weights(&fit);
        assert!((w.weights_mu[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.weights_mu[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(w.weights_mu[2].is_infinite());
        assert!(w.weights_var[0].is_infinite());
        assert_eq!(w.weights_var[1], 2.0);
    }

    #[test]
    fn counts() {
        let p = SvcParams::new(
            vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0],
            [0.2, 0.0, 0.25, 0.0, 0.25, 0.2, 0.0, 0.0].iter().map(|&v| GpParams::new(0.1, v)).collect(),
            0.1,
        );
        assert_eq!(count_nonzero(&p), (4, 4));
        let z = SvcParams::new(vec![0.0; 3], vec![GpParams::new(1.0, 0.0)], 1.0);
        assert_eq!(count_nonzero(&z), (0, 0));
    }

    #[test]
    fn bounds_layout() {
        let b = default_bounds(2, 0.05);
        assert_eq!(b.lower, vec![0.05, 0.0, 0.05, 0.0, 1e-4]);
        assert!(b.upper.iter().all(|u| u.is_infinite()));
        assert!((grid_min_range(15) - 1.0 / 45.0).abs() < 1e-15);
    }

    #[test]
    fn huge_mean_penalty_zeroes_mu() {
        let data = nugget_only(5, 30);
        let spec = KernelSpec::new(KernelFamily::Exponential);
        let aniso = AnisotropyMatrix::identity(2);
        let bounds = default_bounds(0, 0.01);
        let mle = fit_mle(&data, &spec, &aniso, &bounds, None).unwrap();
        let fit = fit_pmle(&data, &spec, &aniso, &bounds, (1e6, 1e6), &mle, &CdConfig::default()).unwrap();
        assert!(fit.params.mu.iter().all(|m| *m == 0.0));
        // the nugget absorbs the signal
        assert!(fit.params.nugget > mle.params.nugget);
    }

    #[test]
    fn embed_restores_layout() {
        let sub = SvcParams::new(vec![1.0, 2.0], vec![GpParams::new(0.3, 0.4)], 0.1);
        let full = embed_params(&sub, &[0, 3], &[2], 4, 3, 0.5);
        assert_eq!(full.mu, vec![1.0, 0.0, 0.0, 2.0]);
        assert_eq!(full.gp[2], GpParams::new(0.3, 0.4));
        assert_eq!(full.gp[0], GpParams::new(0.5, 0.0));
    }
}
