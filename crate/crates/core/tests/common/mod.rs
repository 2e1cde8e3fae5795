//! Random problem generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svcsel_core::{AnisotropyMatrix, Dataset, GpParams, KernelFamily, KernelSpec, Locations, SvcParams};

pub const FAMILIES: [KernelFamily; 3] = [KernelFamily::Exponential, KernelFamily::Matern32, KernelFamily::Matern52];

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Closed forms written out independently of the library.
pub fn corr(family: KernelFamily, u: f64) -> f64 {
    match family {
        KernelFamily::Exponential => (-u).exp(),
        KernelFamily::Matern32 => {
            let a = 3f64.sqrt() * u;
            (1.0 + a) * (-a).exp()
        }
        KernelFamily::Matern52 => {
            let a = 5f64.sqrt() * u;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

pub fn random_aniso(rng: &mut ChaCha8Rng) -> AnisotropyMatrix {
    if rng.random_bool(0.5) {
        return AnisotropyMatrix::identity(2);
    }
    let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    AnisotropyMatrix::new(&b * b.transpose() + DMatrix::identity(2, 2) * 0.3).unwrap()
}

pub struct Instance {
    pub data: Dataset,
    pub params: SvcParams,
    pub spec: KernelSpec,
    pub aniso: AnisotropyMatrix,
}

/// Random dataset with `w` columns drawn independently of `x`; some variances
/// are set to zero when `allow_zero` is on.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize, allow_zero: bool) -> Instance {
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let locations = Locations::new(2, coords).unwrap();
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(rng) });
    let w = DMatrix::from_fn(n, q, |_, k| if k == 0 { 1.0 } else { normal(rng) });
    let y = DVector::from_fn(n, |_, _| 2.0 * normal(rng));
    let data = Dataset::new(y, x, w, locations).unwrap();
    let mu = (0..p).map(|_| normal(rng)).collect();
    let gp = (0..q)
        .map(|_| {
            let var = if allow_zero && rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.05..2.0) };
            GpParams::new(rng.random_range(0.05..0.8), var)
        })
        .collect();
    let params = SvcParams::new(mu, gp, rng.random_range(0.05..1.0));
    let spec = KernelSpec::new(FAMILIES[rng.random_range(0..3)]);
    let aniso = random_aniso(rng);
    Instance { data, params, spec, aniso }
}

pub fn distance(a: &[f64], b: &[f64], aniso: &AnisotropyMatrix) -> f64 {
    let d = DVector::from_fn(a.len(), |i, _| a[i] - b[i]);
    (d.transpose() * aniso.matrix() * &d)[(0, 0)].max(0.0).sqrt()
}

/// `Σ_Y` entry by entry from the model definition.
pub fn sigma_y(data: &Dataset, params: &SvcParams, spec: &KernelSpec, aniso: &AnisotropyMatrix) -> DMatrix<f64> {
    let n = data.n();
    DMatrix::from_fn(n, n, |i, j| {
        let d = distance(data.locations.point(i), data.locations.point(j), aniso);
        let mut s = if i == j { params.nugget } else { 0.0 };
        for (k, g) in params.gp.iter().enumerate() {
            s += data.w[(i, k)] * data.w[(j, k)] * g.variance * corr(spec.family, d / g.range);
        }
        s
    })
}

/// Gaussian log-density with an explicit inverse and an LU determinant.
pub fn brute_loglik(data: &Dataset, params: &SvcParams, spec: &KernelSpec, aniso: &AnisotropyMatrix) -> f64 {
    let s = sigma_y(data, params, spec, aniso);
    let n = data.n() as f64;
    let r = &data.y - &data.x * DVector::from_column_slice(&params.mu);
    let inv = s.clone().try_inverse().unwrap();
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
}

/// Central differences with a relative step.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * x[i].abs().max(1e-2);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}
