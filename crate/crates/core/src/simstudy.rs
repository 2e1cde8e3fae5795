//! Synthetic SVC data and the replication harness for selection studies.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::kernels::{covariance_matrix, AnisotropyMatrix, GpParams, KernelSpec, Locations};
use crate::linalg::Cholesky;
use crate::mbo::{tune_shrinkage, TuneConfig};
use crate::model::{Dataset, FitResult, SvcModel, SvcParams};
use crate::pmle::{default_theta_init, embed_params, fit_mle_with, grid_min_range, default_bounds, FitOptions};

/// One location per cell of an `m × m` grid on the unit square, drawn
/// uniformly from the cell shrunk by `margin` cell widths on each side.
pub fn perturbed_grid<R: Rng + ?Sized>(m: usize, margin: f64, rng: &mut R) -> Result<Locations> {
    if m < 2 {
        return Err(SvcError::invalid("grid side must be at least 2"));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(SvcError::invalid("margin fraction must lie in [0, 0.5)"));
    }
    let cell = 1.0 / m as f64;
    let inner = (1.0 - 2.0 * margin) * cell;
    let mut coords = Vec::with_capacity(2 * m * m);
    for i in 0..m {
        for j in 0..m {
            let x = i as f64 * cell + margin * cell + inner * rng.random::<f64>();
            let y = j as f64 * cell + margin * cell + inner * rng.random::<f64>();
            coords.push(x);
            coords.push(y);
        }
    }
    Locations::new(2, coords)
}

/// Rows i.i.d. `N_p(0, Γ)` with `Γ_jk = γ^|j−k|`.
pub fn sample_covariates<R: Rng + ?Sized>(n: usize, p: usize, gamma: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(gamma.abs() < 1.0) {
        return Err(SvcError::invalid("covariate correlation must satisfy |gamma| < 1"));
    }
    let cov = DMatrix::from_fn(p, p, |j, k| gamma.powi((j as i32 - k as i32).abs()));
    let chol = Cholesky::factor(&cov, 0.0)?;
    let l = chol.l();
    let mut x = DMatrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for j in 0..p {
            let mut s = 0.0;
            for (k, zk) in z.iter().enumerate().take(j + 1) {
                s += l[(j, k)] * zk;
            }
            x[(i, j)] = s;
        }
    }
    Ok(x)
}

/// Zero-mean GP draw `L z` with `L Lᵀ = Σ`.
pub fn sample_gp<R: Rng + ?Sized>(
    locs: &Locations,
    params: &GpParams,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
    rng: &mut R,
) -> Result<DVector<f64>> {
    params.validate()?;
    let n = locs.len();
    if params.variance == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let cov = covariance_matrix(locs, params, spec, aniso)?;
    let chol = Cholesky::factor(&cov, 1e-10 * params.variance)?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Grid side; `n = m²`.
    pub m: usize,
    pub gamma: f64,
    pub true_mu: Vec<f64>,
    pub true_gp: Vec<GpParams>,
    pub nugget: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub margin: f64,
    pub kernel: KernelSpec,
    /// Draw new covariates for every replicate (otherwise replicate 0's are reused).
    pub resample_covariates: bool,
}

/// Placeholder range for SVCs with zero true variance.
pub const NULL_RANGE: f64 = 0.1;

impl Default for SimConfig {
    fn default() -> Self {
        let var = [0.2, 0.0, 0.25, 0.0, 0.25, 0.2, 0.0, 0.0];
        let range = [0.2, NULL_RANGE, 0.1, NULL_RANGE, 0.075, 0.1, NULL_RANGE, NULL_RANGE];
        SimConfig {
            m: 15,
            gamma: 0.5,
            true_mu: vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0],
            true_gp: range.iter().zip(var).map(|(&r, v)| GpParams::new(r, v)).collect(),
            nugget: 0.1,
            n_reps: 100,
            seed: 0,
            margin: 0.05,
            kernel: KernelSpec::exponential(),
            resample_covariates: true,
        }
    }
}

impl SimConfig {
    pub fn p(&self) -> usize {
        self.true_mu.len()
    }

    pub fn n(&self) -> usize {
        self.m * self.m
    }

    pub fn truth(&self) -> SvcParams {
        SvcParams::new(self.true_mu.clone(), self.true_gp.clone(), self.nugget)
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_gp.len() != self.true_mu.len() {
            return Err(SvcError::invalid("true_mu and true_gp must have the same length"));
        }
        if !(self.gamma.abs() < 1.0) {
            return Err(SvcError::invalid("gamma must satisfy |gamma| < 1"));
        }
        if self.m < 2 {
            return Err(SvcError::invalid("grid side must be at least 2"));
        }
        self.truth().validate(self.p(), self.p())
    }

    /// Generator for replicate `rep`: independent of the order reps are run in.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Latent components of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub params: SvcParams,
    pub eta: Vec<DVector<f64>>,
    pub noise: DVector<f64>,
}

/// `y_i = Σ_j μ_j x_ij + Σ_k η_k(s_i) x_ik + ε_i`, summed in that order.
pub fn compose_response(x: &DMatrix<f64>, mu: &[f64], eta: &[DVector<f64>], noise: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let mut v = 0.0;
        for (j, m) in mu.iter().enumerate() {
            v += m * x[(i, j)];
        }
        for (k, e) in eta.iter().enumerate() {
            v += e[i] * x[(i, k)];
        }
        v + noise[i]
    })
}

pub fn generate_dataset(cfg: &SimConfig, rep: usize) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let mut rng = cfg.rng(rep);
    let aniso = AnisotropyMatrix::identity(2);
    let locs = perturbed_grid(cfg.m, cfg.margin, &mut rng)?;
    let n = locs.len();
    let p = cfg.p();
    let x = if cfg.resample_covariates || rep == 0 {
        sample_covariates(n, p, cfg.gamma, &mut rng)?
    } else {
        let mut first = cfg.rng(0);
        perturbed_grid(cfg.m, cfg.margin, &mut first)?;
        sample_covariates(n, p, cfg.gamma, &mut first)?
    };
    let mut eta = Vec::with_capacity(p);
    for gp in &cfg.true_gp {
        eta.push(sample_gp(&locs, gp, &cfg.kernel, &aniso, &mut rng)?);
    }
    let sd = cfg.nugget.sqrt();
    let noise = DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    let y = compose_response(&x, &cfg.true_mu, &eta, &noise);
    let data = Dataset::new(y, x.clone(), x, locs)?;
    Ok((
        data,
        SimTruth {
            params: cfg.truth(),
            eta,
            noise,
        },
    ))
}

/// `‖y − ŷ‖₁ / ‖y − ȳ‖₁`.
pub fn rme(y: &DVector<f64>, y_hat: &DVector<f64>) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(SvcError::invalid("y and y_hat differ in length"));
    }
    let mean = y.mean();
    let denom: f64 = y.iter().map(|v| (v - mean).abs()).sum();
    if denom == 0.0 {
        return Err(SvcError::DivisionByZero("response is constant"));
    }
    Ok(y.iter().zip(y_hat.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub c_fixed: usize,
    pub ic_fixed: usize,
    pub c_random: usize,
    pub ic_random: usize,
}

/// Correct (truly zero) and incorrect (truly nonzero) exact zeros in the estimate.
pub fn selection_counts(estimate: &SvcParams, truth: &SvcParams) -> Result<SelectionCounts> {
    if estimate.mu.len() != truth.mu.len() || estimate.gp.len() != truth.gp.len() {
        return Err(SvcError::invalid("estimate and truth have different dimensions"));
    }
    let mut c = SelectionCounts::default();
    for (e, t) in estimate.mu.iter().zip(&truth.mu) {
        if *e == 0.0 {
            if *t == 0.0 {
                c.c_fixed += 1;
            } else {
                c.ic_fixed += 1;
            }
        }
    }
    for (e, t) in estimate.gp.iter().zip(&truth.gp) {
        if e.variance == 0.0 {
            if t.variance == 0.0 {
                c.c_random += 1;
            } else {
                c.ic_random += 1;
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "PMLE")]
    Pmle,
    #[serde(rename = "Oracle")]
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mle => "MLE",
            Method::Pmle => "PMLE",
            Method::Oracle => "Oracle",
        }
    }
}

/// Fixed effects and SVCs of the default truth with nonzero mean / variance.
pub fn true_support(cfg: &SimConfig) -> (Vec<usize>, Vec<usize>) {
    let fixed = cfg.true_mu.iter().enumerate().filter(|(_, m)| **m != 0.0).map(|(j, _)| j).collect();
    let svc = cfg.true_gp.iter().enumerate().filter(|(_, g)| g.variance != 0.0).map(|(k, _)| k).collect();
    (fixed, svc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub rep: usize,
    pub method: Method,
    pub rme: f64,
    pub counts: SelectionCounts,
    pub lambda: Option<(f64, f64)>,
    pub cd_iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub bic: f64,
    pub params: SvcParams,
}

impl StudyRow {
    pub fn csv_header(p: usize, q: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "rep",
            "method",
            "rme",
            "c_fixed",
            "ic_fixed",
            "c_random",
            "ic_random",
            "lambda_mu",
            "lambda_theta",
            "cd_iterations",
            "converged",
            "loglik",
            "bic",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((1..=p).map(|j| format!("mu_{j}")));
        for k in 1..=q {
            h.push(format!("range_{k}"));
            h.push(format!("var_{k}"));
        }
        h.push("nugget".into());
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:?}");
        let mut r = vec![
            self.rep.to_string(),
            self.method.name().to_string(),
            f(self.rme),
            self.counts.c_fixed.to_string(),
            self.counts.ic_fixed.to_string(),
            self.counts.c_random.to_string(),
            self.counts.ic_random.to_string(),
            self.lambda.map(|l| f(l.0)).unwrap_or_default(),
            self.lambda.map(|l| f(l.1)).unwrap_or_default(),
            self.cd_iterations.to_string(),
            self.converged.to_string(),
            f(self.loglik),
            f(self.bic),
        ];
        r.extend(self.params.mu.iter().map(|&v| f(v)));
        for g in &self.params.gp {
            r.push(f(g.range));
            r.push(f(g.variance));
        }
        r.push(f(self.params.nugget));
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub rep: usize,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mrme: f64,
    pub mean_c_fixed: f64,
    pub mean_ic_fixed: f64,
    pub mean_c_random: f64,
    pub mean_ic_random: f64,
    pub median_cd_iterations: f64,
    pub max_cd_iterations: usize,
    pub n_not_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_reps: usize,
    pub methods: Vec<MethodSummary>,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub failures: Vec<FailedRun>,
    pub summary: StudySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub fit: FitOptions,
    pub tune: TuneConfig,
    /// Run replicates concurrently.
    pub parallel: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            fit: FitOptions::default(),
            tune: TuneConfig::default(),
            parallel: true,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn row_from_fit(rep: usize, method: Method, model: &SvcModel<'_>, fit: &FitResult, params: SvcParams, truth: &SvcParams) -> Result<StudyRow> {
    let y_hat = model.fitted_values(&params)?;
    Ok(StudyRow {
        rep,
        method,
        rme: rme(&model.data().y, &y_hat)?,
        counts: selection_counts(&params, truth)?,
        lambda: fit.lambda,
        cd_iterations: fit.iterations,
        converged: fit.converged,
        loglik: fit.loglik,
        bic: fit.bic,
        params,
    })
}

/// Fit every requested method on replicate `rep`.
pub fn run_replicate(cfg: &SimConfig, rep: usize, methods: &[Method], opts: &StudyOptions) -> Vec<std::result::Result<StudyRow, FailedRun>> {
    let fail = |method: Method, e: SvcError| FailedRun {
        rep,
        method,
        error: e.to_string(),
    };
    let (data, truth) = match generate_dataset(cfg, rep) {
        Ok(d) => d,
        Err(e) => return methods.iter().map(|&m| Err(fail(m, e.clone()))).collect(),
    };
    let aniso = AnisotropyMatrix::identity(2);
    let model = match SvcModel::new(&data, cfg.kernel, aniso.clone()) {
        Ok(m) => m,
        Err(e) => return methods.iter().map(|&m| Err(fail(m, e.clone()))).collect(),
    };
    let bounds = default_bounds(data.q(), grid_min_range(cfg.m));
    let theta0 = default_theta_init(&data, &bounds);
    let needs_mle = methods.iter().any(|m| matches!(m, Method::Mle | Method::Pmle));
    let mle = if needs_mle {
        Some(fit_mle_with(&model, &bounds, &theta0, &opts.fit))
    } else {
        None
    };
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let row = match method {
            Method::Mle => match mle.as_ref().expect("mle computed") {
                Ok(fit) => row_from_fit(rep, method, &model, fit, fit.params.clone(), &truth.params),
                Err(e) => Err(e.clone()),
            },
            Method::Pmle => match mle.as_ref().expect("mle computed") {
                Ok(mle) => {
                    let tune = TuneConfig {
                        seed: cfg.seed,
                        stream: rep as u64,
                        ..opts.tune
                    };
                    tune_shrinkage(&model, &bounds, mle, &opts.fit, &tune)
                        .and_then(|t| row_from_fit(rep, method, &model, &t.best_fit, t.best_fit.params.clone(), &truth.params))
                }
                Err(e) => Err(e.clone()),
            },
            Method::Oracle => {
                let (fixed, svc) = true_support(cfg);
                data.select_columns(&fixed, &svc).and_then(|sub| {
                    let sub_model = SvcModel::new(&sub, cfg.kernel, aniso.clone())?;
                    let sub_bounds = default_bounds(sub.q(), grid_min_range(cfg.m));
                    let sub_theta = default_theta_init(&sub, &sub_bounds);
                    let fit = fit_mle_with(&sub_model, &sub_bounds, &sub_theta, &opts.fit)?;
                    let full = embed_params(&fit.params, &fixed, &svc, data.p(), data.q(), theta0[0]);
                    row_from_fit(rep, method, &model, &fit, full, &truth.params)
                })
            }
        };
        out.push(row.map_err(|e| fail(method, e)));
    }
    out
}

pub fn summarize(rows: &[StudyRow], failures: &[FailedRun], methods: &[Method], n_reps: usize, runtime_secs: f64) -> StudySummary {
    let methods = methods
        .iter()
        .map(|&method| {
            let rs: Vec<&StudyRow> = rows.iter().filter(|r| r.method == method).collect();
            let k = rs.len() as f64;
            let mean = |f: &dyn Fn(&StudyRow) -> usize| rs.iter().map(|r| f(r) as f64).sum::<f64>() / k;
            let mut rmes: Vec<f64> = rs.iter().map(|r| r.rme).collect();
            let mut iters: Vec<f64> = rs.iter().map(|r| r.cd_iterations as f64).collect();
            MethodSummary {
                method,
                n_ok: rs.len(),
                n_failed: failures.iter().filter(|f| f.method == method).count(),
                mrme: median(&mut rmes),
                mean_c_fixed: mean(&|r| r.counts.c_fixed),
                mean_ic_fixed: mean(&|r| r.counts.ic_fixed),
                mean_c_random: mean(&|r| r.counts.c_random),
                mean_ic_random: mean(&|r| r.counts.ic_random),
                median_cd_iterations: median(&mut iters),
                max_cd_iterations: rs.iter().map(|r| r.cd_iterations).max().unwrap_or(0),
                n_not_converged: rs.iter().filter(|r| !r.converged).count(),
            }
        })
        .collect();
    StudySummary {
        n_reps,
        methods,
        runtime_secs,
    }
}

/// Run `cfg.n_reps` replicates; rows are ordered by (rep, method) regardless of scheduling.
pub fn run_study(cfg: &SimConfig, methods: &[Method], opts: &StudyOptions) -> Result<StudyResult> {
    cfg.validate()?;
    opts.tune.validate()?;
    let start = Instant::now();
    let per_rep: Vec<_> = if opts.parallel {
        (0..cfg.n_reps)
            .into_par_iter()
            .map(|rep| run_replicate(cfg, rep, methods, opts))
            .collect()
    } else {
        (0..cfg.n_reps).map(|rep| run_replicate(cfg, rep, methods, opts)).collect()
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in per_rep.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => {
                log::warn!("replicate {} ({}) failed: {}", f.rep, f.method.name(), f.error);
                failures.push(f);
            }
        }
    }
    let summary = summarize(&rows, &failures, methods, cfg.n_reps, start.elapsed().as_secs_f64());
    Ok(StudyResult { rows, failures, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let locs = perturbed_grid(15, 0.05, &mut rng).unwrap();
        assert_eq!(locs.len(), 225);
        let mut occ = vec![0; 225];
        for p in locs.iter() {
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            let i = (p[0] * 15.0).floor() as usize;
            let j = (p[1] * 15.0).floor() as usize;
            occ[i * 15 + j] += 1;
        }
        assert!(occ.iter().all(|&c| c == 1));
    }

    #[test]
    fn near_half_margin_hits_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let locs = perturbed_grid(4, 0.5 - 1e-9, &mut rng).unwrap();
        let p = locs.point(5);
        assert!((p[0] - 0.375).abs() < 1e-8 && (p[1] - 0.375).abs() < 1e-8);
    }

    #[test]
    fn null_gp_draw_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let locs = perturbed_grid(3, 0.05, &mut rng).unwrap();
        let v = sample_gp(&locs, &GpParams::new(0.1, 0.0), &KernelSpec::exponential(), &AnisotropyMatrix::identity(2), &mut rng).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn counts_against_truth() {
        let cfg = SimConfig::default();
        let t = cfg.truth();
        let c = selection_counts(&t, &t).unwrap();
        assert_eq!(c, SelectionCounts { c_fixed: 4, ic_fixed: 0, c_random: 4, ic_random: 0 });
        let zero = SvcParams::new(vec![0.0; 8], t.gp.clone(), 0.1);
        let c = selection_counts(&zero, &t).unwrap();
        assert_eq!((c.c_fixed, c.ic_fixed), (4, 4));
        let dense = SvcParams::new(vec![1.0; 8], vec![GpParams::new(0.1, 1.0); 8], 0.1);
        assert_eq!(selection_counts(&dense, &t).unwrap(), SelectionCounts::default());
    }

    #[test]
    fn rme_limits() {
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        assert_eq!(rme(&y, &y).unwrap(), 0.0);
        let mean = DVector::from_element(3, y.mean());
        assert!((rme(&y, &mean).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(rme(&DVector::from_element(3, 2.0), &y), Err(SvcError::DivisionByZero(_))));
    }

    #[test]
    fn dataset_is_reproducible() {
        let cfg = SimConfig { m: 5, ..SimConfig::default() };
        let (a, ta) = generate_dataset(&cfg, 3).unwrap();
        let (b, _) = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
        let (c, _) = generate_dataset(&cfg, 4).unwrap();
        assert_ne!(a.y, c.y);
        let y = compose_response(&a.x, &cfg.true_mu, &ta.eta, &ta.noise);
        assert_eq!(y, a.y);
    }

    #[test]
    fn csv_row_shape() {
        let row = StudyRow {
            rep: 0,
            method: Method::Oracle,
            rme: 0.1,
            counts: SelectionCounts::default(),
            lambda: None,
            cd_iterations: 3,
            converged: true,
            loglik: -1.0,
            bic: 2.0,
            params: SimConfig::default().truth(),
        };
        assert_eq!(StudyRow::csv_header(8, 8).len(), row.csv_record().len());
    }
}
