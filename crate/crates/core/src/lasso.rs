//! Mean step: Cholesky whitening of the GLS problem and a cyclic coordinate
//! descent solver for the per-coefficient weighted L1 problem
//!
//! ```text
//! argmin_μ  1/(2n) ‖ỹ − X̃μ‖² + Σ_j λ_j |μ_j|
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::linalg::Cholesky;

/// `ỹ = L⁻¹ y`, `X̃ = L⁻¹ X` for `L Lᵀ = Σ_Y`.
#[derive(Debug, Clone)]
pub struct WhitenedProblem {
    pub y_tilde: DVector<f64>,
    pub x_tilde: DMatrix<f64>,
    pub chol: Cholesky,
}

pub fn whiten(y: &DVector<f64>, x: &DMatrix<f64>, sigma_y: &DMatrix<f64>) -> Result<WhitenedProblem> {
    let chol = Cholesky::factor(sigma_y, 0.0)?;
    whiten_with(chol, y, x)
}

/// Whitening with an already computed factor.
pub fn whiten_with(chol: Cholesky, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<WhitenedProblem> {
    let n = chol.dim();
    if y.len() != n || x.nrows() != n {
        return Err(SvcError::invalid(format!(
            "whitening dimension mismatch: Σ is {n}x{n}, y has {}, X has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    Ok(WhitenedProblem {
        y_tilde: chol.solve_lower(y),
        x_tilde: chol.solve_lower_mat(x),
        chol,
    })
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Stop when the largest coefficient change in a sweep is below `tol · max(1, ‖μ‖∞)`.
    pub tol: f64,
    pub record_objective: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_sweeps: 100_000,
            tol: 1e-9,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub mu: Vec<f64>,
    pub sweeps: usize,
    /// Objective after each sweep (only with `record_objective`); entry 0 is the start value.
    pub objective_trace: Vec<f64>,
}

/// `1/(2n) ‖ỹ − X̃μ‖² + Σ λ_j |μ_j|` (zero coordinates carry no penalty).
pub fn lasso_objective(y: &DVector<f64>, x: &DMatrix<f64>, lambdas: &[f64], mu: &[f64]) -> f64 {
    let n = y.len() as f64;
    let fit = x * DVector::from_column_slice(mu);
    let rss = (y - fit).norm_squared();
    let pen: f64 = lambdas
        .iter()
        .zip(mu)
        .map(|(&l, &m)| if m == 0.0 { 0.0 } else { l * m.abs() })
        .sum();
    rss / (2.0 * n) + pen
}

/// Weighted lasso by cyclic coordinate descent with exact soft-threshold updates.
pub fn weighted_lasso(
    y_tilde: &DVector<f64>,
    x_tilde: &DMatrix<f64>,
    lambdas: &[f64],
    mu_init: &[f64],
) -> Result<Vec<f64>> {
    weighted_lasso_with(y_tilde, x_tilde, lambdas, mu_init, &LassoOptions::default()).map(|s| s.mu)
}

pub fn weighted_lasso_with(
    y_tilde: &DVector<f64>,
    x_tilde: &DMatrix<f64>,
    lambdas: &[f64],
    mu_init: &[f64],
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let n = y_tilde.len();
    let p = x_tilde.ncols();
    if x_tilde.nrows() != n || lambdas.len() != p || mu_init.len() != p {
        return Err(SvcError::invalid("weighted lasso dimension mismatch"));
    }
    if n == 0 {
        return Err(SvcError::invalid("weighted lasso needs at least one observation"));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(SvcError::invalid("lasso penalties must be nonnegative"));
    }
    if y_tilde.iter().chain(x_tilde.iter()).chain(mu_init).any(|v| !v.is_finite()) {
        return Err(SvcError::invalid("non-finite lasso input"));
    }
    let nf = n as f64;
    // Covariance-update form: G = X̃ᵀX̃ / n, b = X̃ᵀỹ / n.
    let gram = x_tilde.tr_mul(x_tilde) / nf;
    let xty = x_tilde.tr_mul(y_tilde) / nf;
    let active: Vec<bool> = (0..p)
        .map(|j| lambdas[j].is_finite() && gram[(j, j)] > 0.0)
        .collect();
    let mut mu: Vec<f64> = mu_init
        .iter()
        .zip(&active)
        .map(|(&m, &a)| if a { m } else { 0.0 })
        .collect();
    // grad_j = b_j − Σ_k G_jk μ_k  (= X̃_jᵀ(ỹ − X̃μ)/n)
    let mut corr: Vec<f64> = (0..p)
        .map(|j| xty[j] - (0..p).map(|k| gram[(j, k)] * mu[k]).sum::<f64>())
        .collect();
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(lasso_objective(y_tilde, x_tilde, lambdas, &mu));
    }
    for sweep in 1..=opts.max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if !active[j] {
                continue;
            }
            let gjj = gram[(j, j)];
            let old = mu[j];
            let z = corr[j] + gjj * old;
            let new = soft_threshold(z, lambdas[j]) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                mu[j] = new;
                for (k, c) in corr.iter_mut().enumerate() {
                    *c -= gram[(k, j)] * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if opts.record_objective {
            trace.push(lasso_objective(y_tilde, x_tilde, lambdas, &mu));
        }
        let scale = mu.iter().fold(1.0f64, |a, m| a.max(m.abs()));
        if max_change < opts.tol * scale {
            return Ok(LassoSolution {
                mu,
                sweeps: sweep,
                objective_trace: trace,
            });
        }
    }
    Err(SvcError::LassoNotConverged {
        sweeps: opts.max_sweeps,
        last: mu,
    })
}

/// Largest KKT violation of a weighted lasso solution.
pub fn kkt_residual(y: &DVector<f64>, x: &DMatrix<f64>, lambdas: &[f64], mu: &[f64]) -> f64 {
    let n = y.len() as f64;
    let r = y - x * DVector::from_column_slice(mu);
    let grad = x.tr_mul(&r) / n;
    let mut worst = 0.0f64;
    for j in 0..mu.len() {
        if lambdas[j].is_infinite() {
            continue;
        }
        let v = if mu[j] == 0.0 {
            (grad[j].abs() - lambdas[j]).max(0.0)
        } else {
            (grad[j] - lambdas[j] * mu[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Generalized least squares `(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹y` via whitened normal equations.
pub fn gls(y: &DVector<f64>, x: &DMatrix<f64>, sigma_y: &DMatrix<f64>) -> Result<Vec<f64>> {
    let w = whiten(y, x, sigma_y)?;
    least_squares(&w.y_tilde, &w.x_tilde)
}

/// Ordinary least squares through the normal equations.
pub fn least_squares(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Ok(Vec::new());
    }
    if x.nrows() < p {
        return Err(SvcError::SingularDesign);
    }
    let gram = x.tr_mul(x);
    let max_diag = (0..p).map(|j| gram[(j, j)]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return Err(SvcError::SingularDesign);
    }
    let chol = Cholesky::factor(&gram, 0.0).map_err(|_| SvcError::SingularDesign)?;
    let min_pivot = (0..p).map(|j| chol.l()[(j, j)].powi(2)).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-13 * max_diag {
        return Err(SvcError::SingularDesign);
    }
    Ok(chol.solve(&x.tr_mul(y)).iter().copied().collect())
}
