//! Shared fixtures for the benchmarks.

use nalgebra::{DMatrix, DVector};
use svcsel_core::{generate_dataset, Dataset, SimConfig, SvcParams};

/// Simulated dataset on an `m × m` grid.
pub fn dataset(m: usize) -> Dataset {
    let cfg = SimConfig {
        m,
        n_reps: 1,
        ..SimConfig::default()
    };
    generate_dataset(&cfg, 0).expect("valid config").0
}

/// The data-generating parameters with placeholder ranges filled in.
pub fn truth() -> SvcParams {
    let cfg = SimConfig::default();
    SvcParams::new(cfg.true_mu.clone(), cfg.true_gp.clone(), cfg.nugget)
}

/// Deterministic well-conditioned regression problem.
pub fn regression(n: usize, p: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 13) as f64 * 0.37).sin());
    let beta = DVector::from_fn(p, |j, _| if j % 2 == 0 { 1.0 + j as f64 } else { 0.0 });
    let noise = DVector::from_fn(n, |i, _| 0.1 * (i as f64 * 1.7).cos());
    (&x * beta + noise, x)
}
