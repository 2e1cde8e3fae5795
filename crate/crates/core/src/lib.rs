//! Variable selection for Gaussian-process spatially varying coefficient (SVC)
//! models by penalized maximum likelihood.
//!
//! The model is `y = Xμ + Σ_k w⁽ᵏ⁾ ⊙ η_k + ε` with independent zero-mean GPs
//! `η_k` and nugget `ε ~ N(0, τ² I)`. Fixed effects `μ` and GP variances `σ_k²`
//! are shrunk with adaptive L1 penalties; the two shrinkage levels are tuned by
//! model-based optimization of a BIC.
//!
//! ```no_run
//! use svcsel_core::{fit_mle, default_bounds, grid_min_range, generate_dataset, SimConfig};
//! use svcsel_core::{AnisotropyMatrix, KernelSpec};
//!
//! let cfg = SimConfig { m: 10, ..SimConfig::default() };
//! let (data, _) = generate_dataset(&cfg, 0).unwrap();
//! let bounds = default_bounds(data.q(), grid_min_range(cfg.m));
//! let mle = fit_mle(&data, &KernelSpec::exponential(), &AnisotropyMatrix::identity(2), &bounds, None).unwrap();
//! println!("{:?}", mle.params);
//! ```

pub mod error;
pub mod kernels;
pub mod lasso;
pub mod linalg;
pub mod mbo;
pub mod model;
pub mod optim;
pub mod pmle;
pub mod predict;
pub mod simstudy;

pub use error::{Result, SvcError};
pub use kernels::{
    aniso_distance, correlation, correlation_derivative, covariance_matrix, covariance_matrix_range_derivative,
    AnisotropyMatrix, GpParams, KernelFamily, KernelSpec, Locations,
};
pub use lasso::{gls, weighted_lasso, whiten, WhitenedProblem};
pub use mbo::{
    bic, expected_improvement, fit_surrogate, latin_hypercube, tune_shrinkage, LambdaBounds, MboEval, Surrogate,
    TuneConfig, TuneResult,
};
pub use model::{
    assemble_sigma_y, log_likelihood, neg_pll_theta_gradient, penalized_log_likelihood, CdStep, Dataset, FitResult,
    PenaltyConfig, SvcModel, SvcParams,
};
pub use optim::{minimize_box, BoxBounds, OptimOptions, OptimReport, Termination};
pub use pmle::{
    adaptive_weights, count_nonzero, default_bounds, default_min_range, default_theta_init, fit_mle, fit_mle_with,
    fit_pmle, fit_pmle_with, grid_min_range, CdConfig, FitOptions, GradientMode,
};
pub use predict::{fit_alasso, kfold_cv, predict, rmse, AlassoFit, CvMethod, CvOptions, CvResult, FoldPlan};
pub use simstudy::{
    generate_dataset, perturbed_grid, rme, run_study, sample_covariates, sample_gp, selection_counts, Method,
    SelectionCounts, SimConfig, StudyOptions, StudyResult, StudyRow,
};

/// JSON has no infinities: non-finite floats are written as `null` and read back as `+∞`.
pub(crate) mod serde_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
