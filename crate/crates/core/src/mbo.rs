//! Shrinkage-parameter tuning by model-based optimization of the BIC.
//!
//! The λ box is mapped to the unit square on the log₁₀ scale; a constant-trend
//! Matérn-3/2 kriging model is refit after every evaluation and the next point
//! maximizes expected improvement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Result, SvcError};
use crate::kernels::KernelFamily;
use crate::linalg::{dot, Cholesky};
use crate::model::{FitResult, SvcModel};
use crate::optim::{fd_gradient, minimize_box, BoxBounds, OptimOptions};
use crate::pmle::{fit_pmle_with, FitOptions};

/// `−2ℓ + ln(n) (‖μ‖₀ + ‖σ²‖₀)`.
pub fn bic(loglik: f64, nonzero_mu: usize, nonzero_var: usize, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * (nonzero_mu + nonzero_var) as f64
}

/// Latin hypercube sample of `n` points in `[0, 1]^d`.
pub fn latin_hypercube_unit<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(rng);
        for (pt, &s) in pts.iter_mut().zip(&strata) {
            pt[j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Latin hypercube sample of λ pairs, stratified on the log₁₀ scale of `bounds`.
pub fn latin_hypercube<R: Rng + ?Sized>(n_init: usize, bounds: &LambdaBounds, rng: &mut R) -> Vec<(f64, f64)> {
    latin_hypercube_unit(n_init, 2, rng)
        .into_iter()
        .map(|u| bounds.from_unit(&u))
        .collect()
}

/// Box in (λ_μ, λ_θ) space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub lower: (f64, f64),
    pub upper: (f64, f64),
}

impl Default for LambdaBounds {
    fn default() -> Self {
        LambdaBounds {
            lower: (1e-6, 1e-6),
            upper: (1.0, 1.0),
        }
    }
}

impl LambdaBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = LambdaBounds {
            lower: (lo, lo),
            upper: (hi, hi),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |l: f64, u: f64| l > 0.0 && u > l && u.is_finite();
        if !ok(self.lower.0, self.upper.0) || !ok(self.lower.1, self.upper.1) {
            return Err(SvcError::invalid("lambda bounds must satisfy 0 < lower < upper < inf"));
        }
        Ok(())
    }

    /// Point of the unit square mapped to λ on the log₁₀ scale.
    pub fn from_unit(&self, u: &[f64]) -> (f64, f64) {
        let map = |t: f64, l: f64, h: f64| 10f64.powf(l.log10() + t * (h.log10() - l.log10()));
        (
            map(u[0], self.lower.0, self.upper.0),
            map(u[1], self.lower.1, self.upper.1),
        )
    }

    pub fn to_unit(&self, lambda: (f64, f64)) -> Vec<f64> {
        let inv = |v: f64, l: f64, h: f64| (v.log10() - l.log10()) / (h.log10() - l.log10());
        vec![
            inv(lambda.0, self.lower.0, self.upper.0),
            inv(lambda.1, self.lower.1, self.upper.1),
        ]
    }
}

/// Kriging model with constant trend and isotropic Matérn-3/2 covariance
/// `σ² (R(ℓ) + g I)`, where `g` is the nugget relative to `σ²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Surrogate {
    pub design: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub range: f64,
    /// Process variance σ².
    pub variance: f64,
    /// Nugget as a fraction of the process variance.
    pub nugget_ratio: f64,
    pub trend: f64,
    /// All values equal: zero process variance, constant prediction.
    pub degenerate: bool,
    #[serde(skip)]
    chol: Option<Cholesky>,
    #[serde(skip)]
    weights: Vec<f64>,
    #[serde(skip)]
    r_inv_one: Vec<f64>,
    #[serde(skip)]
    one_r_inv_one: f64,
}

const LOG_RANGE_BOUNDS: (f64, f64) = (-4.6, 2.3);
const LOG_NUGGET_BOUNDS: (f64, f64) = (-13.8, 0.0);

fn matern32_corr(a: &[f64], b: &[f64], range: f64) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    KernelFamily::Matern32.corr(d / range)
}

fn correlation_matrix(design: &[Vec<f64>], range: f64, nugget_ratio: f64) -> nalgebra::DMatrix<f64> {
    let m = design.len();
    nalgebra::DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0 + nugget_ratio
        } else {
            matern32_corr(&design[i], &design[j], range)
        }
    })
}

struct Profile {
    chol: Cholesky,
    trend: f64,
    variance: f64,
    r_inv_one: Vec<f64>,
    one_r_inv_one: f64,
    weights: Vec<f64>,
    neg_loglik: f64,
}

fn profile(design: &[Vec<f64>], values: &[f64], range: f64, nugget_ratio: f64) -> Result<Profile> {
    let m = values.len();
    let r = correlation_matrix(design, range, nugget_ratio);
    let chol = Cholesky::factor(&r, 0.0)?;
    let ones = nalgebra::DVector::from_element(m, 1.0);
    let r_inv_one = chol.solve(&ones);
    let one_r_inv_one = r_inv_one.sum();
    let yv = nalgebra::DVector::from_column_slice(values);
    let trend = dot(r_inv_one.as_slice(), values) / one_r_inv_one;
    let resid = yv.map(|v| v - trend);
    let weights = chol.solve(&resid);
    let variance = dot(resid.as_slice(), weights.as_slice()) / m as f64;
    let neg_loglik = 0.5 * m as f64 * variance.max(1e-300).ln() + 0.5 * chol.log_det();
    Ok(Profile {
        chol,
        trend,
        variance,
        r_inv_one: r_inv_one.as_slice().to_vec(),
        one_r_inv_one,
        weights: weights.as_slice().to_vec(),
        neg_loglik,
    })
}

/// Fit the kriging surrogate by maximum likelihood (process variance and trend
/// profiled out; log range and log nugget ratio optimized).
pub fn fit_surrogate(designs: &[Vec<f64>], values: &[f64]) -> Result<Surrogate> {
    if designs.len() != values.len() || designs.len() < 2 {
        return Err(SvcError::invalid("surrogate needs at least two design points with values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SvcError::invalid("surrogate values must be finite"));
    }
    let first = values[0];
    if values.iter().all(|v| *v == first) {
        return Surrogate::from_parameters(designs, values, 1.0, (LOG_NUGGET_BOUNDS.0).exp());
    }
    let objective = |x: &[f64]| -> f64 {
        match profile(designs, values, x[0].exp(), x[1].exp()) {
            Ok(p) if p.neg_loglik.is_finite() => p.neg_loglik,
            _ => f64::INFINITY,
        }
    };
    // coarse grid, then local refinement
    let mut best = (f64::INFINITY, vec![0.0, -6.0]);
    for i in 0..15 {
        let lr = LOG_RANGE_BOUNDS.0 + (LOG_RANGE_BOUNDS.1 - LOG_RANGE_BOUNDS.0) * i as f64 / 14.0;
        for j in 0..8 {
            let lg = LOG_NUGGET_BOUNDS.0 + (LOG_NUGGET_BOUNDS.1 - LOG_NUGGET_BOUNDS.0) * j as f64 / 7.0;
            let f = objective(&[lr, lg]);
            if f < best.0 {
                best = (f, vec![lr, lg]);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(SvcError::Numerical("surrogate likelihood is not finite on the search grid".into()));
    }
    let bounds = BoxBounds::new(
        vec![LOG_RANGE_BOUNDS.0, LOG_NUGGET_BOUNDS.0],
        vec![LOG_RANGE_BOUNDS.1, LOG_NUGGET_BOUNDS.1],
    )?;
    let opts = OptimOptions {
        max_iter: 100,
        gtol: 1e-6,
        ftol: 1e-10,
        ..OptimOptions::default()
    };
    let refined = minimize_box(
        |x: &[f64]| {
            let f = objective(x);
            if !f.is_finite() {
                return Err(SvcError::Numerical("surrogate likelihood not finite".into()));
            }
            let g = fd_gradient(|y| Ok(objective(y)), x, Some(&bounds))?;
            Ok((f, g))
        },
        &best.1,
        &bounds,
        &opts,
    );
    let x = match refined {
        Ok(r) if r.f_star <= best.0 => r.x_star,
        _ => best.1,
    };
    Surrogate::from_parameters(designs, values, x[0].exp(), x[1].exp())
}

impl Surrogate {
    /// Surrogate with fixed correlation range and nugget ratio; trend and variance profiled.
    pub fn from_parameters(designs: &[Vec<f64>], values: &[f64], range: f64, nugget_ratio: f64) -> Result<Self> {
        let p = profile(designs, values, range, nugget_ratio)?;
        let degenerate = !(p.variance > 0.0);
        Ok(Surrogate {
            design: designs.to_vec(),
            values: values.to_vec(),
            range,
            variance: if degenerate { 0.0 } else { p.variance },
            nugget_ratio,
            trend: p.trend,
            degenerate,
            chol: Some(p.chol),
            weights: p.weights,
            r_inv_one: p.r_inv_one,
            one_r_inv_one: p.one_r_inv_one,
        })
    }

    /// Absolute nugget variance `g σ²`.
    pub fn nugget(&self) -> f64 {
        self.nugget_ratio * self.variance
    }

    /// Predictive mean and (latent) variance, the latter including the
    /// uncertainty of the estimated constant trend.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let c: Vec<f64> = self.design.iter().map(|d| matern32_corr(x, d, self.range)).collect();
        let mean = self.trend + dot(&c, &self.weights);
        if self.degenerate {
            return (mean, 0.0);
        }
        let chol = self.chol.as_ref().expect("surrogate factor present after fitting");
        let mut z = c.clone();
        chol.solve_lower_in_place(&mut z);
        let quad = dot(&z, &z);
        let u = 1.0 - dot(&self.r_inv_one, &c);
        let var = self.variance * (1.0 - quad + u * u / self.one_r_inv_one);
        (mean, var.max(0.0))
    }

    pub fn expected_improvement(&self, x: &[f64], xi_min: f64) -> f64 {
        let (m, v) = self.predict(x);
        expected_improvement(m, v.sqrt(), xi_min)
    }
}

/// `E[max(ξ_min − Ξ, 0)]` for `Ξ ~ N(mean, sd²)`.
pub fn expected_improvement(mean: f64, sd: f64, xi_min: f64) -> f64 {
    let diff = xi_min - mean;
    if !(sd > 0.0) {
        return diff.max(0.0);
    }
    let z = diff / sd;
    let std = Normal::standard();
    (diff * std.cdf(z) + sd * std.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub bounds: LambdaBounds,
    pub n_init: usize,
    pub n_iter: usize,
    pub seed: u64,
    /// Random stream, for independent tuning runs under one seed.
    pub stream: u64,
    /// Evaluate the initial design concurrently.
    pub parallel: bool,
    /// Multistart count for the EI maximization.
    pub ei_restarts: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            bounds: LambdaBounds::default(),
            n_init: 10,
            n_iter: 10,
            seed: 0,
            stream: 0,
            parallel: true,
            ei_restarts: 64,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.n_init < 2 {
            return Err(SvcError::invalid("n_init must be at least 2"));
        }
        if self.ei_restarts == 0 {
            return Err(SvcError::invalid("ei_restarts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Infill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MboEval {
    pub index: usize,
    pub phase: Phase,
    pub lambda_mu: f64,
    pub lambda_theta: f64,
    /// `+∞` when the fit failed.
    #[serde(with = "crate::serde_float")]
    pub bic: f64,
    /// Expected improvement at proposal time (infill points only).
    pub ei: Option<f64>,
    pub cd_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda_hat: (f64, f64),
    pub best_bic: f64,
    pub best_index: usize,
    pub trace: Vec<MboEval>,
    /// The penalized fit at `lambda_hat`.
    pub best_fit: FitResult,
}

/// Tune (λ_μ, λ_θ) by minimizing BIC over PMLE fits sharing the adaptive
/// weights of `mle`.
pub fn tune_shrinkage(
    model: &SvcModel<'_>,
    bounds: &BoxBounds,
    mle: &FitResult,
    opts: &FitOptions,
    cfg: &TuneConfig,
) -> Result<TuneResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let evaluate = |u: &[f64]| -> (f64, f64, std::result::Result<FitResult, SvcError>) {
        let lambda = cfg.bounds.from_unit(u);
        (lambda.0, lambda.1, fit_pmle_with(model, bounds, lambda, mle, opts))
    };

    let init = latin_hypercube_unit(cfg.n_init, 2, &mut rng);
    let results: Vec<_> = if cfg.parallel {
        init.par_iter().map(|u| evaluate(u)).collect()
    } else {
        init.iter().map(|u| evaluate(u)).collect()
    };
    let mut units = init.clone();
    let mut trace = Vec::with_capacity(cfg.n_init + cfg.n_iter);
    let mut best: Option<(usize, FitResult)> = None;
    let mut record = |index: usize,
                      phase: Phase,
                      ei: Option<f64>,
                      (lm, lt, res): (f64, f64, std::result::Result<FitResult, SvcError>),
                      trace: &mut Vec<MboEval>| {
        let (bic, cd_iterations, error) = match &res {
            Ok(fit) if fit.bic.is_finite() => (fit.bic, Some(fit.iterations), None),
            Ok(fit) => (f64::INFINITY, Some(fit.iterations), Some("non-finite BIC".to_string())),
            Err(e) => (f64::INFINITY, None, Some(e.to_string())),
        };
        if let Ok(fit) = res {
            if bic.is_finite() && best.as_ref().is_none_or(|(_, b)| bic < b.bic) {
                best = Some((index, fit));
            }
        }
        trace.push(MboEval {
            index,
            phase,
            lambda_mu: lm,
            lambda_theta: lt,
            bic,
            ei,
            cd_iterations,
            error,
        });
    };
    for (i, r) in results.into_iter().enumerate() {
        record(i, Phase::Initial, None, r, &mut trace);
    }

    for it in 0..cfg.n_iter {
        let values: Vec<f64> = trace.iter().map(|e| e.bic).collect();
        let finite_max = values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let (next, ei) = if finite_max.is_finite() {
            let imputed: Vec<f64> = values.iter().map(|v| if v.is_finite() { *v } else { finite_max }).collect();
            let xi_min = imputed.iter().copied().fold(f64::INFINITY, f64::min);
            match fit_surrogate(&units, &imputed) {
                Ok(s) => {
                    let (x, ei) = maximize_ei(&s, xi_min, cfg.ei_restarts, &mut rng);
                    (x, Some(ei))
                }
                Err(_) => (vec![rng.random::<f64>(), rng.random::<f64>()], None),
            }
        } else {
            (vec![rng.random::<f64>(), rng.random::<f64>()], None)
        };
        let r = evaluate(&next);
        units.push(next);
        record(cfg.n_init + it, Phase::Infill, ei, r, &mut trace);
    }

    match best {
        Some((best_index, best_fit)) => Ok(TuneResult {
            lambda_hat: best_fit.lambda.unwrap_or((trace[best_index].lambda_mu, trace[best_index].lambda_theta)),
            best_bic: best_fit.bic,
            best_index,
            trace,
            best_fit,
        }),
        None => Err(SvcError::Numerical(format!(
            "all {} shrinkage evaluations failed",
            trace.len()
        ))),
    }
}

/// Multistart pattern search for the EI maximizer on the unit square.
fn maximize_ei<R: Rng + ?Sized>(s: &Surrogate, xi_min: f64, restarts: usize, rng: &mut R) -> (Vec<f64>, f64) {
    let starts = latin_hypercube_unit(restarts, 2, rng);
    let mut best = (starts[0].clone(), f64::NEG_INFINITY);
    for x0 in starts {
        let mut x = x0;
        let mut fx = s.expected_improvement(&x, xi_min);
        let mut step = 0.1;
        while step > 1e-4 {
            let mut improved = false;
            for j in 0..x.len() {
                for dir in [-1.0, 1.0] {
                    let mut y = x.clone();
                    y[j] = (y[j] + dir * step).clamp(0.0, 1.0);
                    let fy = s.expected_improvement(&y, xi_min);
                    if fy > fx {
                        x = y;
                        fx = fy;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if fx > best.1 {
            best = (x, fx);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_values() {
        assert_eq!(bic(0.0, 0, 0, 10), 0.0);
        let b = bic(-303.9, 3, 0, 322);
        assert!((b - 625.1).abs() < 0.1);
    }

    #[test]
    fn lhs_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = LambdaBounds::default();
        let pts = latin_hypercube(10, &b, &mut rng);
        for dim in 0..2 {
            let mut counts = [0usize; 10];
            for p in &pts {
                let v = if dim == 0 { p.0 } else { p.1 };
                let u = (v.log10() + 6.0) / 6.0;
                counts[(u * 10.0).floor() as usize] += 1;
            }
            assert_eq!(counts, [1; 10]);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(pts, latin_hypercube(10, &b, &mut rng2));
    }

    #[test]
    fn unit_mapping_roundtrip() {
        let b = LambdaBounds::default();
        let l = b.from_unit(&[0.25, 0.9]);
        let u = b.to_unit(l);
        assert!((u[0] - 0.25).abs() < 1e-12 && (u[1] - 0.9).abs() < 1e-12);
        assert!((b.from_unit(&[0.0, 1.0]).0 - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn ei_special_cases() {
        assert_eq!(expected_improvement(5.0, 0.0, 3.0), 0.0);
        assert_eq!(expected_improvement(1.0, 0.0, 3.0), 2.0);
        let v = expected_improvement(2.0, 1.0, 2.0);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn surrogate_interpolates() {
        let d = vec![vec![0.1, 0.2], vec![0.8, 0.6]];
        let s = fit_surrogate(&d, &[3.0, 5.0]).unwrap();
        let (m, v) = s.predict(&d[0]);
        assert!((m - 3.0).abs() <= 2.0 * s.nugget().sqrt() + 1e-8, "{m}");
        assert!(v <= s.nugget() + 1e-8);
    }

    #[test]
    fn constant_values_are_degenerate() {
        let d = vec![vec![0.1, 0.2], vec![0.8, 0.6], vec![0.4, 0.4]];
        let s = fit_surrogate(&d, &[2.0, 2.0, 2.0]).unwrap();
        assert!(s.degenerate);
        let (m, v) = s.predict(&[0.5, 0.5]);
        assert!((m - 2.0).abs() < 1e-12);
        assert_eq!(v, 0.0);
    }
}
