//! Correlation functions of the half-integer Matérn family, anisotropic
//! distances and the covariance matrices built from them.
//!
//! Every covariance has the form `c(s, s'; ρ, σ²) = σ² r(‖s − s'‖_A / ρ)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvcError};
use crate::linalg::Cholesky;

/// Matérn smoothness classes with closed-form correlation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// ν = 1/2, `r(u) = exp(−u)`.
    #[default]
    Exponential,
    /// ν = 3/2.
    Matern32,
    /// ν = 5/2.
    Matern52,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

impl KernelFamily {
    pub fn smoothness(self) -> f64 {
        match self {
            KernelFamily::Exponential => 0.5,
            KernelFamily::Matern32 => 1.5,
            KernelFamily::Matern52 => 2.5,
        }
    }

    /// `r(u)` without argument checking.
    #[inline]
    pub fn corr(self, u: f64) -> f64 {
        match self {
            KernelFamily::Exponential => (-u).exp(),
            KernelFamily::Matern32 => {
                let a = SQRT3 * u;
                (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = SQRT5 * u;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }

    /// `r'(u)` without argument checking.
    #[inline]
    pub fn corr_deriv(self, u: f64) -> f64 {
        match self {
            KernelFamily::Exponential => -(-u).exp(),
            KernelFamily::Matern32 => -3.0 * u * (-SQRT3 * u).exp(),
            KernelFamily::Matern52 => {
                let a = SQRT5 * u;
                -(5.0 / 3.0) * u * (1.0 + a) * (-a).exp()
            }
        }
    }

    /// `(r(u), r'(u))` sharing the exponential.
    #[inline]
    pub fn corr_and_deriv(self, u: f64) -> (f64, f64) {
        match self {
            KernelFamily::Exponential => {
                let e = (-u).exp();
                (e, -e)
            }
            KernelFamily::Matern32 => {
                let a = SQRT3 * u;
                let e = (-a).exp();
                ((1.0 + a) * e, -3.0 * u * e)
            }
            KernelFamily::Matern52 => {
                let a = SQRT5 * u;
                let e = (-a).exp();
                (
                    (1.0 + a + a * a / 3.0) * e,
                    -(5.0 / 3.0) * u * (1.0 + a) * e,
                )
            }
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = SvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" | "exponential" | "matern12" => Ok(KernelFamily::Exponential),
            "matern32" => Ok(KernelFamily::Matern32),
            "matern52" => Ok(KernelFamily::Matern52),
            other => Err(SvcError::invalid(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Kernel family shared by every SVC of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub family: KernelFamily,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec { family }
    }

    pub fn exponential() -> Self {
        Self::new(KernelFamily::Exponential)
    }

    pub fn smoothness(&self) -> f64 {
        self.family.smoothness()
    }
}

/// Symmetric positive definite scaling of coordinate space.
#[derive(Debug, Clone, PartialEq)]
pub struct AnisotropyMatrix {
    a: DMatrix<f64>,
    identity: bool,
}

impl AnisotropyMatrix {
    pub fn identity(d: usize) -> Self {
        AnisotropyMatrix {
            a: DMatrix::identity(d, d),
            identity: true,
        }
    }

    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || d == 0 {
            return Err(SvcError::invalid("anisotropy matrix must be square and non-empty"));
        }
        let scale = a.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                    return Err(SvcError::invalid("anisotropy matrix must be symmetric"));
                }
            }
        }
        Cholesky::factor(&a, 0.0)
            .map_err(|_| SvcError::invalid("anisotropy matrix must be positive definite"))?;
        let identity = a == DMatrix::identity(d, d);
        Ok(AnisotropyMatrix { a, identity })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }
}

/// Range and variance of one GP component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub range: f64,
    pub variance: f64,
}

impl GpParams {
    pub fn new(range: f64, variance: f64) -> Self {
        GpParams { range, variance }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !self.range.is_finite() {
            return Err(SvcError::invalid(format!("range must be positive, got {}", self.range)));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(SvcError::invalid(format!(
                "variance must be nonnegative, got {}",
                self.variance
            )));
        }
        Ok(())
    }
}

/// Observation coordinates, stored row-major (`n` points of dimension `d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Locations {
    dim: usize,
    coords: Vec<f64>,
}

impl Locations {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(SvcError::invalid("coordinate dimension must be at least 1"));
        }
        if coords.len() % dim != 0 {
            return Err(SvcError::invalid("coordinate buffer length is not a multiple of dimension"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(SvcError::invalid("non-finite coordinate"));
        }
        Ok(Locations { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(SvcError::invalid("points have inconsistent dimensions"));
        }
        Self::new(dim, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn subset(&self, idx: &[usize]) -> Locations {
        let coords = idx.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        Locations { dim: self.dim, coords }
    }

    /// Largest pairwise Euclidean distance.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                best = best.max(euclid(self.point(i), self.point(j)));
            }
        }
        best
    }

    /// Mean Euclidean distance from each point to its nearest distinct neighbour.
    pub fn mean_nearest_neighbor(&self) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let nn = (0..n)
                .filter(|&j| j != i)
                .map(|j| euclid(self.point(i), self.point(j)))
                .filter(|&d| d > 0.0)
                .fold(f64::INFINITY, f64::min);
            if nn.is_finite() {
                total += nn;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sqrt((a − b)ᵀ A (a − b))`.
pub fn aniso_distance(a: &[f64], b: &[f64], aniso: &AnisotropyMatrix) -> Result<f64> {
    let d = aniso.dim();
    if a.len() != d || b.len() != d {
        return Err(SvcError::invalid(format!(
            "coordinate dimension mismatch: {} and {} vs anisotropy {}",
            a.len(),
            b.len(),
            d
        )));
    }
    Ok(aniso_distance_unchecked(a, b, aniso))
}

#[inline]
pub(crate) fn aniso_distance_unchecked(a: &[f64], b: &[f64], aniso: &AnisotropyMatrix) -> f64 {
    if aniso.is_identity() {
        return euclid(a, b);
    }
    let d = a.len();
    let m = &aniso.a;
    let mut q = 0.0;
    for i in 0..d {
        let di = a[i] - b[i];
        for j in 0..d {
            q += di * m[(i, j)] * (a[j] - b[j]);
        }
    }
    q.max(0.0).sqrt()
}

pub fn correlation(u: f64, spec: &KernelSpec) -> Result<f64> {
    check_lag(u)?;
    Ok(spec.family.corr(u))
}

pub fn correlation_derivative(u: f64, spec: &KernelSpec) -> Result<f64> {
    check_lag(u)?;
    Ok(spec.family.corr_deriv(u))
}

fn check_lag(u: f64) -> Result<()> {
    if u >= 0.0 && !u.is_nan() {
        Ok(())
    } else {
        Err(SvcError::invalid(format!("scaled distance must be nonnegative, got {u}")))
    }
}

/// Pairwise distances in packed strict-upper-triangular order.
///
/// Entry `(i, j)` with `i < j` lives at `j (j − 1) / 2 + i`, i.e. column by column.
#[derive(Debug, Clone)]
pub struct PackedDistances {
    n: usize,
    d: Vec<f64>,
}

impl PackedDistances {
    pub fn new(locs: &Locations, aniso: &AnisotropyMatrix) -> Result<Self> {
        if locs.dim() != aniso.dim() {
            return Err(SvcError::invalid(format!(
                "locations have dimension {} but anisotropy matrix is {}x{}",
                locs.dim(),
                aniso.dim(),
                aniso.dim()
            )));
        }
        let n = locs.len();
        let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for j in 0..n {
            for i in 0..j {
                d.push(aniso_distance_unchecked(locs.point(i), locs.point(j), aniso));
            }
        }
        Ok(PackedDistances { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Distances of column `j` for rows `0..j`.
    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        let start = j * j.saturating_sub(1) / 2;
        &self.d[start..start + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

fn check_cov_inputs(locs: &Locations, params: &GpParams) -> Result<()> {
    if locs.is_empty() {
        return Err(SvcError::invalid("at least one location is required"));
    }
    params.validate()
}

/// `(Σ)_{lm} = σ² r(‖s_l − s_m‖_A / ρ)`.
pub fn covariance_matrix(
    locs: &Locations,
    params: &GpParams,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<DMatrix<f64>> {
    check_cov_inputs(locs, params)?;
    let dist = PackedDistances::new(locs, aniso)?;
    Ok(covariance_from_distances(&dist, params, spec))
}

pub(crate) fn covariance_from_distances(
    dist: &PackedDistances,
    params: &GpParams,
    spec: &KernelSpec,
) -> DMatrix<f64> {
    let n = dist.n();
    let mut m = DMatrix::zeros(n, n);
    if params.variance == 0.0 {
        return m;
    }
    let inv_range = 1.0 / params.range;
    for j in 0..n {
        m[(j, j)] = params.variance;
        for (i, &u) in dist.column(j).iter().enumerate() {
            let v = params.variance * spec.family.corr(u * inv_range);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `∂Σ/∂ρ = σ² r'(U/ρ) ⊙ (−U/ρ²)`.
pub fn covariance_matrix_range_derivative(
    locs: &Locations,
    params: &GpParams,
    spec: &KernelSpec,
    aniso: &AnisotropyMatrix,
) -> Result<DMatrix<f64>> {
    check_cov_inputs(locs, params)?;
    let dist = PackedDistances::new(locs, aniso)?;
    let n = dist.n();
    let mut m = DMatrix::zeros(n, n);
    if params.variance == 0.0 {
        return Ok(m);
    }
    let rho = params.range;
    for j in 0..n {
        for (i, &u) in dist.column(j).iter().enumerate() {
            let v = params.variance * spec.family.corr_deriv(u / rho) * (-u / (rho * rho));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}
