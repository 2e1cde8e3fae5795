//! Box-constrained limited-memory quasi-Newton minimizer.
//!
//! Projected L-BFGS: the two-loop recursion is applied to the gradient restricted
//! to the free variables (those not held at a bound by the sign of their
//! gradient) and steps are projected back onto the box, with a backtracking
//! Armijo search along the projected path. Every iterate is feasible.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};

/// Componentwise bounds, entries may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(SvcError::invalid("bounds have different lengths"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(SvcError::invalid("lower bound exceeds upper bound"));
        }
        Ok(BoxBounds { lower, upper })
    }

    pub fn unbounded(m: usize) -> Self {
        BoxBounds {
            lower: vec![f64::NEG_INFINITY; m],
            upper: vec![f64::INFINITY; m],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    FuncTol,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub n_evals: usize,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Projected-gradient tolerance, scaled by `max(1, |f|)`.
    pub gtol: f64,
    /// Relative decrease tolerance `(f_k − f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)`.
    pub ftol: f64,
    pub max_line_search: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            memory: 6,
            max_iter: 500,
            gtol: 1e-8,
            ftol: 1e-12,
            max_line_search: 40,
        }
    }
}

const ARMIJO_C1: f64 = 1e-4;

/// Minimize `fg` (returning value and gradient) over the box.
///
/// A failing objective evaluation during the line search is treated like an
/// infinite value and the step is shortened.
pub fn minimize_box<F>(mut fg: F, x0: &[f64], bounds: &BoxBounds, opts: &OptimOptions) -> Result<OptimReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let m = x0.len();
    if bounds.len() != m {
        return Err(SvcError::invalid("bounds and starting point differ in length"));
    }
    if !bounds.contains(x0) {
        return Err(SvcError::invalid("starting point is outside the bounds"));
    }
    let mut x = x0.to_vec();
    let fixed: Vec<bool> = bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| l == u).collect();
    let mut fg = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, mut g) = fg(x)?;
        for (gi, &fx) in g.iter_mut().zip(&fixed) {
            if fx {
                *gi = 0.0;
            }
        }
        Ok((f, g))
    };
    let (mut f, mut g) = fg(&x)?;
    let mut n_evals = 1usize;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) || g.len() != m {
        return Err(SvcError::LineSearch {
            reason: "objective or gradient not finite at the starting point".into(),
            best_x: x,
            best_f: f,
        });
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0usize;

    loop {
        if projected_gradient_norm(&x, &g, bounds) <= opts.gtol * f.abs().max(1.0) {
            return Ok(report(x, f, n_evals, iterations, true, Termination::GradTol));
        }
        if iterations >= opts.max_iter {
            return Ok(report(x, f, n_evals, iterations, false, Termination::MaxIter));
        }
        iterations += 1;

        let free: Vec<bool> = (0..m)
            .map(|i| {
                let at_lower = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_upper = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        let gf: Vec<f64> = g.iter().zip(&free).map(|(&v, &fr)| if fr { v } else { 0.0 }).collect();

        let mut d = two_loop(&gf, &mem);
        for (di, &fr) in d.iter_mut().zip(&free) {
            if !fr {
                *di = 0.0;
            }
            *di = -*di;
        }
        if !(dot(&g, &d) < 0.0) || d.iter().any(|v| !v.is_finite()) {
            mem.clear();
            d = gf.iter().map(|v| -v).collect();
        }
        let mut alpha = if mem.is_empty() {
            let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if dmax > 0.0 {
                (1.0 / dmax).min(1.0)
            } else {
                1.0
            }
        } else {
            1.0
        };

        // backtracking along the projected path
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut saw_finite = false;
        for _ in 0..opts.max_line_search {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            bounds.project(&mut xt);
            if xt == x {
                break;
            }
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if !(decrease < 0.0) {
                // projection turned the step uphill
                break;
            }
            n_evals += 1;
            match fg(&xt) {
                Ok((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                    saw_finite = true;
                    if ft <= f + ARMIJO_C1 * decrease {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                    // safeguarded quadratic interpolation along the ray
                    let denom = 2.0 * (ft - f - decrease);
                    let mut next = if denom > 0.0 { -decrease * alpha / denom } else { 0.5 * alpha };
                    if !next.is_finite() {
                        next = 0.5 * alpha;
                    }
                    alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
                }
                _ => alpha *= 0.25,
            }
        }

        let Some((xt, ft, gt)) = accepted else {
            if !mem.is_empty() {
                // retry from steepest descent before giving up
                mem.clear();
                continue;
            }
            if saw_finite {
                // no decrease is attainable along steepest descent at this precision
                return Ok(report(x, f, n_evals, iterations, true, Termination::FuncTol));
            }
            return Err(SvcError::LineSearch {
                reason: "objective not finite along the search direction".into(),
                best_x: x,
                best_f: f,
            });
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let yy = dot(&yv, &yv);
        if sy > 1e-10 * yy && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, yv, 1.0 / sy));
        }
        let rel = (f - ft) / f.abs().max(ft.abs()).max(1.0);
        x = xt;
        f = ft;
        g = gt;
        if rel <= opts.ftol {
            let conv_grad = projected_gradient_norm(&x, &g, bounds) <= opts.gtol * f.abs().max(1.0);
            let term = if conv_grad { Termination::GradTol } else { Termination::FuncTol };
            return Ok(report(x, f, n_evals, iterations, true, term));
        }
    }
}

fn report(x: Vec<f64>, f: f64, n_evals: usize, iterations: usize, converged: bool, termination: Termination) -> OptimReport {
    OptimReport {
        x_star: x,
        f_star: f,
        n_evals,
        iterations,
        converged,
        termination,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖P(x − g) − x‖∞`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &BoxBounds) -> f64 {
    x.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((&xi, &gi), (&l, &u))| ((xi - gi).clamp(l, u) - xi).abs())
        .fold(0.0, f64::max)
}

/// `H g` for the L-BFGS inverse Hessian approximation.
fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += si * (a - b);
        }
    }
    q
}

/// Central finite-difference gradient, for testing and as a fallback mode.
///
/// Steps that would leave the box are made one-sided.
pub fn fd_gradient<F>(mut f: F, x: &[f64], bounds: Option<&BoxBounds>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (lo, hi) = bounds.map_or((f64::NEG_INFINITY, f64::INFINITY), |b| (b.lower[i], b.upper[i]));
        let up = (x[i] + h).min(hi);
        let dn = (x[i] - h).max(lo);
        xp[i] = up;
        let fu = f(&xp)?;
        xp[i] = dn;
        let fd = f(&xp)?;
        xp[i] = x[i];
        g[i] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let f = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let g = x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok((f, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn interior_quadratic() {
        let c = vec![0.3, -1.2, 2.5];
        let r = minimize_box(quad(c.clone()), &[0.0; 3], &BoxBounds::unbounded(3), &OptimOptions::default()).unwrap();
        assert!(r.converged);
        for (a, b) in r.x_star.iter().zip(&c) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn active_lower_bound_clamps() {
        let b = BoxBounds::new(vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
        let r = minimize_box(quad(vec![-1.0, 2.0]), &[5.0, 5.0], &b, &OptimOptions::default()).unwrap();
        assert_eq!(r.x_star[0], 0.0);
        assert!((r.x_star[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_in_box() {
        let b = BoxBounds::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let r = minimize_box(rosenbrock, &[-1.2, 1.0], &b, &OptimOptions::default()).unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-4 && (r.x_star[1] - 1.0).abs() < 1e-4, "{:?}", r);
        assert!(r.f_star <= 24.2);
    }

    #[test]
    fn iterates_stay_feasible_and_monotone() {
        let b = BoxBounds::new(vec![-0.5, 0.2], vec![0.8, 2.0]).unwrap();
        let mut seen = Vec::new();
        let r = minimize_box(
            |x: &[f64]| {
                seen.push(x.to_vec());
                rosenbrock(x)
            },
            &[-0.4, 1.5],
            &b,
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(seen.iter().all(|x| b.contains(x)));
        assert!(b.contains(&r.x_star));
        assert!(r.f_star <= rosenbrock(&[-0.4, 1.5]).unwrap().0);
        let g = rosenbrock(&r.x_star).unwrap().1;
        assert!(projected_gradient_norm(&r.x_star, &g, &b) < 1e-6, "{:?}", r);
    }

    #[test]
    fn zero_gradient_coordinate_never_moves() {
        let b = BoxBounds::new(vec![0.0, 0.0, 0.0], vec![5.0, 5.0, 5.0]).unwrap();
        let r = minimize_box(
            |x: &[f64]| {
                let f = (x[0] - 1.0).powi(4) + (x[0] * x[2] - 2.0).powi(2) + (x[2] - 1.0).powi(2);
                let g = vec![
                    4.0 * (x[0] - 1.0).powi(3) + 2.0 * (x[0] * x[2] - 2.0) * x[2],
                    0.0,
                    2.0 * (x[0] * x[2] - 2.0) * x[0] + 2.0 * (x[2] - 1.0),
                ];
                Ok((f, g))
            },
            &[3.0, 1.234_567, 0.5],
            &b,
            &OptimOptions::default(),
        )
        .unwrap();
        assert_eq!(r.x_star[1], 1.234_567);
    }

    #[test]
    fn nonfinite_start_is_an_error() {
        let r = minimize_box(|_: &[f64]| Ok((f64::NAN, vec![0.0])), &[0.0], &BoxBounds::unbounded(1), &OptimOptions::default());
        assert!(matches!(r, Err(SvcError::LineSearch { .. })));
    }

    #[test]
    fn start_outside_bounds_rejected() {
        let b = BoxBounds::new(vec![0.0], vec![1.0]).unwrap();
        assert!(minimize_box(quad(vec![0.5]), &[2.0], &b, &OptimOptions::default()).is_err());
        assert!(BoxBounds::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn fd_gradient_matches() {
        let x = [0.3, -0.7];
        let g = fd_gradient(|x| rosenbrock(x).map(|r| r.0), &x, None).unwrap();
        let an = rosenbrock(&x).unwrap().1;
        for (a, b) in g.iter().zip(&an) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }
}
