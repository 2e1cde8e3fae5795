//! Dense Cholesky factorization and the handful of triangular kernels built on it.
//!
//! Matrices are nalgebra column-major `DMatrix<f64>`; the factorization works on
//! contiguous column slices so the inner loops are plain axpy / dot products.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SvcError};

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Cholesky {
    /// Factor a symmetric positive definite matrix. Only the lower triangle is read.
    ///
    /// `jitter` is added to the diagonal before factoring.
    pub fn factor(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(SvcError::invalid(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut l = a.clone();
        if jitter != 0.0 {
            for i in 0..n {
                l[(i, i)] += jitter;
            }
        }
        let data = l.as_mut_slice();
        for j in 0..n {
            let (done, rest) = data.split_at_mut(j * n);
            let col_j = &mut rest[j..n];
            for k in 0..j {
                let col_k = &done[k * n..(k + 1) * n];
                let ljk = col_k[j];
                if ljk != 0.0 {
                    axpy(-ljk, &col_k[j..n], col_j);
                }
            }
            let d = col_j[0];
            if !(d > 0.0) || !d.is_finite() {
                return Err(SvcError::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            col_j[0] = d;
            let inv = 1.0 / d;
            for v in &mut col_j[1..] {
                *v *= inv;
            }
        }
        // zero the strict upper triangle
        for j in 1..n {
            for i in 0..j {
                l[(i, j)] = 0.0;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solve `L x = b` in place (forward substitution).
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for k in 0..n {
            let col = &data[k * n..(k + 1) * n];
            b[k] /= col[k];
            let bk = b[k];
            if bk != 0.0 {
                axpy(-bk, &col[k + 1..], &mut b[k + 1..]);
            }
        }
    }

    /// Solve `Lᵀ x = b` in place (backward substitution).
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for k in (0..n).rev() {
            let col = &data[k * n..(k + 1) * n];
            let s = dot(&col[k + 1..], &b[k + 1..]);
            b[k] = (b[k] - s) / col[k];
        }
    }

    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        x
    }

    /// `L⁻¹ B` applied column by column.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.dim();
        for mut c in x.column_iter_mut() {
            let s = c.as_mut_slice();
            debug_assert_eq!(s.len(), n);
            self.solve_lower_in_place(s);
        }
        x
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    /// `A⁻¹` via `L⁻ᵀ L⁻¹`, exploiting the triangular structure of `L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let ld = self.l.as_slice();
        // Column j of L⁻¹ is zero above row j.
        let mut linv = DMatrix::<f64>::zeros(n, n);
        {
            let li = linv.as_mut_slice();
            for j in 0..n {
                let x = &mut li[j * n..(j + 1) * n];
                x[j] = 1.0;
                for k in j..n {
                    let col = &ld[k * n..(k + 1) * n];
                    x[k] /= col[k];
                    let xk = x[k];
                    if xk != 0.0 {
                        axpy(-xk, &col[k + 1..], &mut x[k + 1..]);
                    }
                }
            }
        }
        let mut inv = DMatrix::<f64>::zeros(n, n);
        let li = linv.as_slice();
        for b in 0..n {
            let cb = &li[b * n + b..(b + 1) * n];
            for a in 0..=b {
                let ca = &li[a * n + b..(a + 1) * n];
                let v = dot(ca, cb);
                inv[(a, b)] = v;
                inv[(b, a)] = v;
            }
        }
        inv
    }
}
