//! Out-of-sample prediction, fold plans and k-fold cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::kernels::{aniso_distance_unchecked, AnisotropyMatrix, KernelSpec, Locations};
use crate::lasso::{least_squares, weighted_lasso_with, LassoOptions};
use crate::mbo::{bic, tune_shrinkage, TuneConfig};
use crate::model::{Dataset, SvcModel, SvcParams};
use crate::pmle::{count_nonzero, default_bounds, default_theta_init, fit_mle_with, FitOptions, WEIGHT_EPS};

/// Conditional mean of the signal at new locations:
/// `X_new μ̂ + c_*ᵀ Σ_Y⁻¹ (y − X μ̂)` with `c_*[i, l] = Σ_k w_new[i,k] w[l,k] σ_k² r(d(s_i, s_l)/ρ_k)`.
pub fn predict(
    params: &SvcParams,
    train: &Dataset,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
    new_locations: &Locations,
    x_new: &DMatrix<f64>,
    w_new: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let m = new_locations.len();
    if x_new.nrows() != m || w_new.nrows() != m {
        return Err(SvcError::invalid("new design rows do not match the number of new locations"));
    }
    if x_new.ncols() != train.p() || w_new.ncols() != train.q() {
        return Err(SvcError::invalid("new design columns do not match the training data"));
    }
    if new_locations.dim() != train.locations.dim() || aniso.dim() != train.locations.dim() {
        return Err(SvcError::invalid("location dimension mismatch"));
    }
    params.validate(train.p(), train.q())?;
    let mut out = x_new * DVector::from_column_slice(&params.mu);
    let active: Vec<usize> = (0..train.q()).filter(|&k| params.gp[k].variance != 0.0).collect();
    if active.is_empty() {
        return Ok(out);
    }
    let model = SvcModel::new(train, *spec, aniso.clone())?;
    let (_, alpha) = model.whitened_weights(params)?;
    let n = train.n();
    for i in 0..m {
        let si = new_locations.point(i);
        let mut acc = 0.0;
        for l in 0..n {
            let d = aniso_distance_unchecked(si, train.locations.point(l), aniso);
            let mut c = 0.0;
            for &k in &active {
                let g = &params.gp[k];
                c += w_new[(i, k)] * train.w[(l, k)] * g.variance * spec.family.corr(d / g.range);
            }
            acc += c * alpha[l];
        }
        out[i] += acc;
    }
    Ok(out)
}

/// `sqrt(mean((y − ŷ)²))`.
pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(SvcError::invalid("rmse needs two nonempty vectors of equal length"));
    }
    let ss: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y_true.len() as f64).sqrt())
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index in `0..k` for each observation.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Shuffle `0..n` with the seeded generator, then cut into contiguous chunks.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || n < k {
            return Err(SvcError::invalid(format!("cannot split {n} observations into {k} folds")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        let (base, extra) = (n / k, n % k);
        let mut pos = 0;
        for fold in 0..k {
            let size = base + usize::from(fold >= k - extra);
            for &i in &perm[pos..pos + size] {
                assignment[i] = fold;
            }
            pos += size;
        }
        Ok(FoldPlan { k, assignment })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Adaptive lasso for the linear model, λ chosen by inner cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlassoFit {
    pub mu: Vec<f64>,
    pub lambda: f64,
    /// Residual variance `RSS / n`.
    pub nugget: f64,
    pub loglik: f64,
    pub bic: f64,
    pub cv_mse: Vec<f64>,
    pub lambda_path: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlassoOptions {
    pub n_lambda: usize,
    /// Smallest λ on the path relative to the largest.
    pub lambda_ratio: f64,
    pub inner_folds: usize,
    pub seed: u64,
    pub lasso: LassoOptions,
}

impl Default for AlassoOptions {
    fn default() -> Self {
        AlassoOptions {
            n_lambda: 100,
            lambda_ratio: 1e-4,
            inner_folds: 10,
            seed: 0,
            lasso: LassoOptions::default(),
        }
    }
}

fn adaptive_penalties(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let ols = least_squares(y, x)?;
    Ok(ols.iter().map(|b| if b.abs() < WEIGHT_EPS { f64::INFINITY } else { 1.0 / b.abs() }).collect())
}

fn lambda_path(y: &DVector<f64>, x: &DMatrix<f64>, weights: &[f64], opts: &AlassoOptions) -> Vec<f64> {
    let n = y.len() as f64;
    let lmax = (0..x.ncols())
        .filter(|&j| weights[j].is_finite())
        .map(|j| x.column(j).dot(y).abs() / (n * weights[j]))
        .fold(0.0, f64::max);
    let lmax = if lmax > 0.0 { lmax } else { 1.0 };
    let steps = opts.n_lambda.max(2) - 1;
    (0..=steps)
        .map(|i| lmax * opts.lambda_ratio.powf(i as f64 / steps as f64))
        .collect()
}

fn path_solutions(y: &DVector<f64>, x: &DMatrix<f64>, weights: &[f64], path: &[f64], opts: &AlassoOptions) -> Result<Vec<Vec<f64>>> {
    let mut mu = vec![0.0; x.ncols()];
    let mut out = Vec::with_capacity(path.len());
    for &lam in path {
        let lambdas: Vec<f64> = weights.iter().map(|w| if w.is_infinite() { f64::INFINITY } else { lam * w }).collect();
        mu = weighted_lasso_with(y, x, &lambdas, &mu, &opts.lasso)?.mu;
        out.push(mu.clone());
    }
    Ok(out)
}

pub fn fit_alasso(y: &DVector<f64>, x: &DMatrix<f64>, opts: &AlassoOptions) -> Result<AlassoFit> {
    let n = y.len();
    let weights = adaptive_penalties(y, x)?;
    let path = lambda_path(y, x, &weights, opts);
    let inner = opts.inner_folds.min(n);
    let plan = FoldPlan::new(n, inner, opts.seed)?;
    let mut cv_mse = vec![0.0; path.len()];
    for fold in 0..inner {
        let tr = plan.train_indices(fold);
        let te = plan.test_indices(fold);
        let ytr = y.select_rows(&tr);
        let xtr = x.select_rows(&tr);
        // weights stay those of the full training set
        let sols = path_solutions(&ytr, &xtr, &weights, &path, opts)?;
        for (c, mu) in cv_mse.iter_mut().zip(&sols) {
            let muv = DVector::from_column_slice(mu);
            for &i in &te {
                let e = y[i] - x.row(i).transpose().dot(&muv);
                *c += e * e / n as f64;
            }
        }
    }
    let best = cv_mse
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc })
        .0;
    let sols = path_solutions(y, x, &weights, &path[..=best], opts)?;
    let mu = sols.last().cloned().unwrap_or_else(|| vec![0.0; x.ncols()]);
    let resid = y - x * DVector::from_column_slice(&mu);
    let nugget = resid.norm_squared() / n as f64;
    if !(nugget > 0.0) {
        return Err(SvcError::Numerical("zero residual variance".into()));
    }
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI).ln() + nugget.ln() + 1.0);
    let k = mu.iter().filter(|m| **m != 0.0).count();
    Ok(AlassoFit {
        bic: bic(loglik, k, 0, n),
        mu,
        lambda: path[best],
        nugget,
        loglik,
        cv_mse,
        lambda_path: path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CvMethod {
    #[serde(rename = "ALASSO")]
    Alasso,
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "PMLE")]
    Pmle,
}

impl CvMethod {
    pub fn name(self) -> &'static str {
        match self {
            CvMethod::Alasso => "ALASSO",
            CvMethod::Mle => "MLE",
            CvMethod::Pmle => "PMLE",
        }
    }
}

impl std::str::FromStr for CvMethod {
    type Err = SvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alasso" => Ok(CvMethod::Alasso),
            "mle" => Ok(CvMethod::Mle),
            "pmle" => Ok(CvMethod::Pmle),
            _ => Err(SvcError::invalid(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub spec: KernelSpec,
    pub aniso: AnisotropyMatrix,
    /// Lower bound for the ranges.
    pub min_range: f64,
    pub fit: FitOptions,
    pub tune: TuneConfig,
    pub alasso: AlassoOptions,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_test: usize,
    pub rmse: Option<f64>,
    pub n_fixed: Option<usize>,
    pub n_random: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub method: CvMethod,
    pub folds: Vec<FoldOutcome>,
    pub mean_rmse: f64,
    /// Sample standard deviation over successful folds.
    pub sd_rmse: f64,
    pub n_failed: usize,
}

/// Fit `method` on the training part of `data` and predict `test`; returns predictions and support sizes.
pub fn fit_and_predict(train: &Dataset, test: &Dataset, method: CvMethod, opts: &CvOptions) -> Result<(DVector<f64>, usize, usize)> {
    match method {
        CvMethod::Alasso => {
            let fit = fit_alasso(&train.y, &train.x, &opts.alasso)?;
            let pred = &test.x * DVector::from_column_slice(&fit.mu);
            let k = fit.mu.iter().filter(|m| **m != 0.0).count();
            Ok((pred, k, 0))
        }
        CvMethod::Mle | CvMethod::Pmle => {
            let model = SvcModel::new(train, opts.spec, opts.aniso.clone())?;
            let bounds = default_bounds(train.q(), opts.min_range);
            let theta0 = default_theta_init(train, &bounds);
            let mle = fit_mle_with(&model, &bounds, &theta0, &opts.fit)?;
            let params = if method == CvMethod::Mle {
                mle.params
            } else {
                tune_shrinkage(&model, &bounds, &mle, &opts.fit, &opts.tune)?.best_fit.params
            };
            let pred = predict(&params, train, &opts.spec, &opts.aniso, &test.locations, &test.x, &test.w)?;
            let (a, b) = count_nonzero(&params);
            Ok((pred, a, b))
        }
    }
}

pub fn kfold_cv(data: &Dataset, k: usize, method: CvMethod, seed: u64, opts: &CvOptions) -> Result<CvResult> {
    let plan = FoldPlan::new(data.n(), k, seed)?;
    let run = |fold: usize| -> FoldOutcome {
        let te = plan.test_indices(fold);
        let outcome = data.subset_rows(&plan.train_indices(fold)).and_then(|train| {
            let test = data.subset_rows(&te)?;
            let (pred, nf, nr) = fit_and_predict(&train, &test, method, opts)?;
            Ok((rmse(test.y.as_slice(), pred.as_slice())?, nf, nr))
        });
        match outcome {
            Ok((r, nf, nr)) => FoldOutcome {
                fold,
                n_test: te.len(),
                rmse: Some(r),
                n_fixed: Some(nf),
                n_random: Some(nr),
                error: None,
            },
            Err(e) => {
                log::warn!("fold {fold} ({}) failed: {e}", method.name());
                FoldOutcome {
                    fold,
                    n_test: te.len(),
                    rmse: None,
                    n_fixed: None,
                    n_random: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let folds: Vec<FoldOutcome> = if opts.parallel {
        (0..k).into_par_iter().map(run).collect()
    } else {
        (0..k).map(run).collect()
    };
    let ok: Vec<f64> = folds.iter().filter_map(|f| f.rmse).collect();
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let sd = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(CvResult {
        method,
        n_failed: folds.len() - ok.len(),
        folds,
        mean_rmse: mean,
        sd_rmse: sd,
    })
}
