//! GP-based SVC model: data containers, response covariance assembly and the
//! (penalized) Gaussian log-likelihood with analytic covariance gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::kernels::{AnisotropyMatrix, GpParams, KernelSpec, Locations};
use crate::linalg::{dot, Cholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Response, fixed-effect design `X` (n×p), random-effect covariates `W` (n×q)
/// and observation locations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub locations: Locations,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, w: DMatrix<f64>, locations: Locations) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(SvcError::invalid("dataset needs at least one observation"));
        }
        if x.nrows() != n || w.nrows() != n || locations.len() != n {
            return Err(SvcError::invalid(format!(
                "row counts disagree: y={n}, X={}, W={}, locations={}",
                x.nrows(),
                w.nrows(),
                locations.len()
            )));
        }
        if x.ncols() == 0 && w.ncols() == 0 {
            return Err(SvcError::invalid("need at least one fixed or random effect covariate"));
        }
        if y.iter().chain(x.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(SvcError::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { y, x, w, locations })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// Keep only the listed fixed-effect and SVC columns.
    pub fn select_columns(&self, fixed: &[usize], svc: &[usize]) -> Result<Dataset> {
        if fixed.iter().any(|&j| j >= self.p()) || svc.iter().any(|&k| k >= self.q()) {
            return Err(SvcError::invalid("column index out of range"));
        }
        Dataset::new(
            self.y.clone(),
            self.x.select_columns(fixed),
            self.w.select_columns(svc),
            self.locations.clone(),
        )
    }

    /// Keep only the listed observations, in the given order.
    pub fn subset_rows(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.iter().any(|&i| i >= self.n()) {
            return Err(SvcError::invalid("row index out of range"));
        }
        Dataset::new(
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            self.x.select_rows(idx),
            self.w.select_rows(idx),
            self.locations.subset(idx),
        )
    }
}

/// Model parameters ω = (μ, θ) with θ = (ρ₁, σ₁², …, ρ_q, σ_q², τ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvcParams {
    pub mu: Vec<f64>,
    pub gp: Vec<GpParams>,
    pub nugget: f64,
}

impl SvcParams {
    pub fn new(mu: Vec<f64>, gp: Vec<GpParams>, nugget: f64) -> Self {
        SvcParams { mu, gp, nugget }
    }

    /// Build from a mean vector and a θ vector in the canonical ordering.
    pub fn from_theta(mu: Vec<f64>, theta: &[f64]) -> Result<Self> {
        if theta.is_empty() || theta.len() % 2 != 1 {
            return Err(SvcError::invalid(format!(
                "theta must have odd length 2q+1, got {}",
                theta.len()
            )));
        }
        let q = theta.len() / 2;
        let gp = (0..q).map(|k| GpParams::new(theta[2 * k], theta[2 * k + 1])).collect();
        Ok(SvcParams { mu, gp, nugget: theta[2 * q] })
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.gp.iter().flat_map(|g| [g.range, g.variance]).collect();
        t.push(self.nugget);
        t
    }

    pub fn validate(&self, p: usize, q: usize) -> Result<()> {
        if self.mu.len() != p || self.gp.len() != q {
            return Err(SvcError::invalid(format!(
                "parameter dimensions (p={}, q={}) do not match data (p={p}, q={q})",
                self.mu.len(),
                self.gp.len()
            )));
        }
        for g in &self.gp {
            g.validate()?;
        }
        if !(self.nugget > 0.0) || !self.nugget.is_finite() {
            return Err(SvcError::invalid(format!("nugget must be positive, got {}", self.nugget)));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(SvcError::invalid("non-finite mean parameter"));
        }
        Ok(())
    }
}

/// Shrinkage pair plus adaptive per-parameter multipliers.
///
/// An infinite weight pins the coordinate at zero regardless of the shrinkage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda_mu: f64,
    pub lambda_theta: f64,
    pub weights_mu: Vec<f64>,
    pub weights_var: Vec<f64>,
}

impl PenaltyConfig {
    /// No shrinkage at all (the plain likelihood).
    pub fn none(p: usize, q: usize) -> Self {
        PenaltyConfig {
            lambda_mu: 0.0,
            lambda_theta: 0.0,
            weights_mu: vec![1.0; p],
            weights_var: vec![1.0; q],
        }
    }

    pub fn mu_penalty(&self, j: usize) -> f64 {
        effective(self.lambda_mu, self.weights_mu[j])
    }

    pub fn var_penalty(&self, k: usize) -> f64 {
        effective(self.lambda_theta, self.weights_var[k])
    }

    pub fn mu_penalties(&self) -> Vec<f64> {
        (0..self.weights_mu.len()).map(|j| self.mu_penalty(j)).collect()
    }

    pub fn var_pinned(&self, k: usize) -> bool {
        self.weights_var[k].is_infinite()
    }
}

fn effective(lambda: f64, weight: f64) -> f64 {
    if weight.is_infinite() {
        f64::INFINITY
    } else {
        lambda * weight
    }
}

/// `λ |v|`, with the convention that a zero coordinate carries no penalty even if λ = ∞.
#[inline]
fn l1_term(lambda: f64, v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        lambda * v.abs()
    }
}

/// One coordinate-descent iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdStep {
    pub iteration: usize,
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub pen_loglik: f64,
}

/// Output of an (M)LE or PML fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: SvcParams,
    pub loglik: f64,
    pub pen_loglik: f64,
    pub bic: f64,
    pub n: usize,
    /// Shrinkage pair `(λ_μ, λ_θ)` for penalized fits.
    pub lambda: Option<(f64, f64)>,
    /// Iterates `t = 0, …, T`.
    pub trace: Vec<CdStep>,
    /// Number of completed coordinate-descent iterations `T`.
    pub iterations: usize,
    pub converged: bool,
    /// Objective evaluations spent in the covariance steps.
    pub evaluations: usize,
}

impl FitResult {
    /// Ranges whose variance is exactly zero cannot be interpreted.
    pub fn non_identifiable_ranges(&self) -> Vec<bool> {
        self.params.gp.iter().map(|g| g.variance == 0.0).collect()
    }

    pub fn nonzero_counts(&self) -> (usize, usize) {
        crate::pmle::count_nonzero(&self.params)
    }
}

/// Dataset bound to a kernel family and anisotropy, with distances precomputed.
#[derive(Debug, Clone)]
pub struct SvcModel<'a> {
    data: &'a Dataset,
    spec: KernelSpec,
    aniso: AnisotropyMatrix,
    /// Strict lower triangle, column by column.
    dist: Vec<f64>,
    jitter: f64,
}

#[inline]
fn lower_offset(n: usize, j: usize) -> usize {
    j * (2 * n - j - 1) / 2
}

impl<'a> SvcModel<'a> {
    pub fn new(data: &'a Dataset, spec: KernelSpec, aniso: AnisotropyMatrix) -> Result<Self> {
        if data.locations.dim() != aniso.dim() {
            return Err(SvcError::invalid(format!(
                "locations have dimension {} but anisotropy matrix is {}-dimensional",
                data.locations.dim(),
                aniso.dim()
            )));
        }
        let n = data.n();
        let mut dist = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for j in 0..n {
            let sj = data.locations.point(j);
            for i in j + 1..n {
                dist.push(crate::kernels::aniso_distance_unchecked(
                    data.locations.point(i),
                    sj,
                    &aniso,
                ));
            }
        }
        Ok(SvcModel { data, spec, aniso, dist, jitter: 0.0 })
    }

    /// Diagonal jitter added to Σ_Y before every factorization.
    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn anisotropy(&self) -> &AnisotropyMatrix {
        &self.aniso
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    pub fn q(&self) -> usize {
        self.data.q()
    }

    pub fn theta_len(&self) -> usize {
        2 * self.q() + 1
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_len() {
            return Err(SvcError::invalid(format!(
                "theta has length {}, expected {}",
                theta.len(),
                self.theta_len()
            )));
        }
        for k in 0..self.q() {
            if !(theta[2 * k] > 0.0) || !(theta[2 * k + 1] >= 0.0) {
                return Err(SvcError::invalid(format!(
                    "invalid GP parameters for SVC {k}: range {}, variance {}",
                    theta[2 * k],
                    theta[2 * k + 1]
                )));
            }
        }
        if !(theta[2 * self.q()] > 0.0) {
            return Err(SvcError::invalid("nugget must be positive"));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(SvcError::invalid("non-finite covariance parameter"));
        }
        Ok(())
    }

    pub fn residual(&self, mu: &[f64]) -> Result<DVector<f64>> {
        if mu.len() != self.p() {
            return Err(SvcError::invalid(format!(
                "mu has length {}, expected {}",
                mu.len(),
                self.p()
            )));
        }
        let mut r = self.data.y.clone();
        for (j, &m) in mu.iter().enumerate() {
            if m != 0.0 {
                r.axpy(-m, &self.data.x.column(j), 1.0);
            }
        }
        Ok(r)
    }

    /// Lower triangle of Σ_Y (strict upper left at zero) plus cached correlation
    /// and range-derivative factors per SVC.
    ///
    /// Kernels are not evaluated for SVCs flagged in `skip` or, without
    /// derivatives, for zero variances; their caches are left empty.
    fn assemble_lower(&self, theta: &[f64], want_deriv: bool, skip: &[bool]) -> (DMatrix<f64>, Vec<KernelCache>) {
        let n = self.n();
        let q = self.q();
        let tau2 = theta[2 * q];
        let mut s = DMatrix::<f64>::zeros(n, n);
        let mut caches = Vec::with_capacity(q);
        let w = &self.data.w;
        for k in 0..q {
            let rho = theta[2 * k];
            let var = theta[2 * k + 1];
            if skip.get(k).copied().unwrap_or(false) || (!want_deriv && var == 0.0) {
                caches.push(KernelCache {
                    corr: Vec::new(),
                    dcorr: Vec::new(),
                });
                continue;
            }
            let wk = w.column(k);
            let wk = wk.as_slice();
            let mut corr = Vec::with_capacity(self.dist.len());
            let mut dcorr = if want_deriv { Vec::with_capacity(self.dist.len()) } else { Vec::new() };
            let inv_rho = 1.0 / rho;
            let family = self.spec.family;
            for &u in &self.dist {
                if want_deriv {
                    let (c, dc) = family.corr_and_deriv(u * inv_rho);
                    corr.push(c);
                    dcorr.push(dc * (-u * inv_rho * inv_rho));
                } else {
                    corr.push(family.corr(u * inv_rho));
                }
            }
            if var != 0.0 {
                let sd = s.as_mut_slice();
                for j in 0..n {
                    let col = &mut sd[j * n..(j + 1) * n];
                    let f = var * wk[j];
                    col[j] += var * wk[j] * wk[j];
                    let off = lower_offset(n, j);
                    let cj = &corr[off..off + n - j - 1];
                    for ((out, &wi), &c) in col[j + 1..].iter_mut().zip(&wk[j + 1..]).zip(cj) {
                        *out += f * wi * c;
                    }
                }
            }
            caches.push(KernelCache { corr, dcorr });
        }
        for i in 0..n {
            s[(i, i)] += tau2;
        }
        (s, caches)
    }

    /// Σ_Y(θ) = Σ_k (w⁽ᵏ⁾w⁽ᵏ⁾ᵀ) ⊙ Σ_k + τ² I.
    pub fn sigma_y(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let (mut s, _) = self.assemble_lower(theta, false, &[]);
        let n = self.n();
        for j in 0..n {
            for i in j + 1..n {
                s[(j, i)] = s[(i, j)];
            }
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(SvcError::Numerical("non-finite entry in response covariance".into()));
        }
        Ok(s)
    }

    pub fn factor(&self, theta: &[f64]) -> Result<Cholesky> {
        self.check_theta(theta)?;
        let (s, _) = self.assemble_lower(theta, false, &[]);
        Cholesky::factor(&s, self.jitter)
    }

    fn loglik_from(&self, chol: &Cholesky, r: &DVector<f64>) -> f64 {
        let mut z = r.clone();
        chol.solve_lower_in_place(z.as_mut_slice());
        -0.5 * (self.n() as f64 * LN_2PI + chol.log_det() + z.norm_squared())
    }

    pub fn log_likelihood(&self, params: &SvcParams) -> Result<f64> {
        params.validate(self.p(), self.q())?;
        let theta = params.theta();
        let chol = self.factor(&theta)?;
        let r = self.residual(&params.mu)?;
        Ok(self.loglik_from(&chol, &r))
    }

    /// Penalty term `n Σ λ_j |μ_j| + n Σ λ_{p+k} |σ_k²|`.
    pub fn penalty(&self, params: &SvcParams, pen: &PenaltyConfig) -> Result<f64> {
        self.check_penalty(pen)?;
        let n = self.n() as f64;
        let mut total = 0.0;
        for (j, &m) in params.mu.iter().enumerate() {
            total += l1_term(pen.mu_penalty(j), m);
        }
        for (k, g) in params.gp.iter().enumerate() {
            total += l1_term(pen.var_penalty(k), g.variance);
        }
        Ok(n * total)
    }

    fn check_penalty(&self, pen: &PenaltyConfig) -> Result<()> {
        if pen.weights_mu.len() != self.p() || pen.weights_var.len() != self.q() {
            return Err(SvcError::invalid("penalty weights do not match model dimensions"));
        }
        if pen.lambda_mu < 0.0
            || pen.lambda_theta < 0.0
            || pen.weights_mu.iter().chain(&pen.weights_var).any(|w| !(*w >= 0.0))
        {
            return Err(SvcError::invalid("penalties must be nonnegative"));
        }
        Ok(())
    }

    pub fn penalized_log_likelihood(&self, params: &SvcParams, pen: &PenaltyConfig) -> Result<f64> {
        let ll = self.log_likelihood(params)?;
        Ok(ll - self.penalty(params, pen)?)
    }

    /// Covariance-step objective `f(θ) = −ℓ(μ, θ) + n Σ_k λ_{p+k} σ_k²` for fixed μ.
    pub fn theta_objective(&self, theta: &[f64], mu: &[f64], pen: &PenaltyConfig) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_penalty(pen)?;
        let chol = self.factor(theta)?;
        let r = self.residual(mu)?;
        Ok(-self.loglik_from(&chol, &r) + self.var_penalty_term(theta, pen))
    }

    fn var_penalty_term(&self, theta: &[f64], pen: &PenaltyConfig) -> f64 {
        let n = self.n() as f64;
        (0..self.q()).map(|k| n * l1_term(pen.var_penalty(k), theta[2 * k + 1])).sum()
    }

    /// Value and analytic gradient of the covariance-step objective.
    ///
    /// For each covariance parameter ψ the likelihood part is
    /// `½ tr(Σ⁻¹ ∂Σ/∂ψ) − ½ rᵀ Σ⁻¹ (∂Σ/∂ψ) Σ⁻¹ r`; each σ_k² component also gets
    /// `n λ_{p+k}`. Variances pinned at zero by an infinite weight get zero components.
    pub fn theta_objective_with_gradient(
        &self,
        theta: &[f64],
        mu: &[f64],
        pen: &PenaltyConfig,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        self.check_penalty(pen)?;
        let n = self.n();
        let q = self.q();
        // variances pinned at zero need neither kernel values nor gradients
        let skip: Vec<bool> = (0..q).map(|k| pen.var_pinned(k) && theta[2 * k + 1] == 0.0).collect();
        let (s, caches) = self.assemble_lower(theta, true, &skip);
        let chol = Cholesky::factor(&s, self.jitter)?;
        let r = self.residual(mu)?;
        let value = -self.loglik_from(&chol, &r) + self.var_penalty_term(theta, pen);

        let alpha = chol.solve(&r);
        // M = Σ⁻¹ − ααᵀ, only the lower triangle is read below.
        let mut m = chol.inverse();
        for j in 0..n {
            let aj = alpha[j];
            for i in j..n {
                m[(i, j)] -= alpha[i] * aj;
            }
        }
        let md = m.as_slice();
        let mut grad = vec![0.0; 2 * q + 1];
        let w = &self.data.w;
        for (k, cache) in caches.iter().enumerate() {
            if skip[k] {
                continue;
            }
            let wk = w.column(k);
            let wk = wk.as_slice();
            let var = theta[2 * k + 1];
            let mut g_var_diag = 0.0;
            let mut g_var_off = 0.0;
            let mut g_rho = 0.0;
            let mut scratch = vec![0.0; n];
            for j in 0..n {
                let col = &md[j * n..(j + 1) * n];
                g_var_diag += col[j] * wk[j] * wk[j];
                let len = n - j - 1;
                if len == 0 {
                    continue;
                }
                let off = lower_offset(n, j);
                let mw = &mut scratch[..len];
                for ((o, &mij), &wi) in mw.iter_mut().zip(&col[j + 1..]).zip(&wk[j + 1..]) {
                    *o = mij * wi;
                }
                g_var_off += wk[j] * dot(mw, &cache.corr[off..off + len]);
                if var != 0.0 {
                    g_rho += wk[j] * dot(mw, &cache.dcorr[off..off + len]);
                }
            }
            grad[2 * k + 1] = 0.5 * g_var_diag + g_var_off;
            // ∂Σ_Y/∂ρ_k is the zero matrix when σ_k² = 0.
            grad[2 * k] = if var != 0.0 { var * g_rho } else { 0.0 };
            if !pen.var_pinned(k) {
                grad[2 * k + 1] += n as f64 * pen.var_penalty(k);
            }
        }
        grad[2 * q] = 0.5 * (0..n).map(|i| m[(i, i)]).sum::<f64>();
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(SvcError::Numerical("non-finite objective or gradient".into()));
        }
        Ok((value, grad))
    }

    /// `α = Σ_Y⁻¹ (y − Xμ)` together with the factor it came from.
    pub fn whitened_weights(&self, params: &SvcParams) -> Result<(Cholesky, DVector<f64>)> {
        params.validate(self.p(), self.q())?;
        let chol = self.factor(&params.theta())?;
        let r = self.residual(&params.mu)?;
        let alpha = chol.solve(&r);
        Ok((chol, alpha))
    }

    /// In-sample fitted values `Xμ̂ + Σ_k w⁽ᵏ⁾ ⊙ E[η_k | y]`, which equals `y − τ² α`.
    pub fn fitted_values(&self, params: &SvcParams) -> Result<DVector<f64>> {
        let (_, alpha) = self.whitened_weights(params)?;
        Ok(&self.data.y - alpha * params.nugget)
    }
}

#[derive(Debug, Clone)]
struct KernelCache {
    corr: Vec<f64>,
    dcorr: Vec<f64>,
}

/// Dense response covariance for `params` on `data`.
pub fn assemble_sigma_y(
    data: &Dataset,
    params: &SvcParams,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<DMatrix<f64>> {
    params.validate(data.p(), data.q())?;
    SvcModel::new(data, *spec, aniso.clone())?.sigma_y(&params.theta())
}

pub fn log_likelihood(
    data: &Dataset,
    params: &SvcParams,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<f64> {
    SvcModel::new(data, *spec, aniso.clone())?.log_likelihood(params)
}

pub fn penalized_log_likelihood(
    data: &Dataset,
    params: &SvcParams,
    pen: &PenaltyConfig,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<f64> {
    SvcModel::new(data, *spec, aniso.clone())?.penalized_log_likelihood(params, pen)
}

/// Gradient of `−pℓ(θ | μ)` in the ordering (ρ₁, σ₁², …, ρ_q, σ_q², τ²).
pub fn neg_pll_theta_gradient(
    data: &Dataset,
    theta: &[f64],
    mu: &[f64],
    pen: &PenaltyConfig,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<Vec<f64>> {
    let model = SvcModel::new(data, *spec, aniso.clone())?;
    Ok(model.theta_objective_with_gradient(theta, mu, pen)?.1)
}
