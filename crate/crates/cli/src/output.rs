use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use svcsel_core::mbo::MboEval;
use svcsel_core::predict::CvResult;
use svcsel_core::simstudy::{FailedRun, StudySummary};
use svcsel_core::{CdStep, FitResult, GpParams, SimConfig, SvcParams};

use crate::data::ModelSpec;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvcEstimate {
    pub name: String,
    pub range: f64,
    pub variance: f64,
    /// False when the variance is zero, so the range carries no information.
    pub range_identifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub fixed: Vec<FixedEffect>,
    pub svc: Vec<SvcEstimate>,
    pub nugget: f64,
    pub loglik: f64,
    pub pen_loglik: f64,
    pub bic: f64,
    pub nonzero_fixed: usize,
    pub nonzero_svc: usize,
    pub lambda: Option<[f64; 2]>,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
    pub trace: Vec<CdStep>,
}

impl Estimate {
    pub fn new(fit: &FitResult, spec: &ModelSpec) -> Self {
        let (nonzero_fixed, nonzero_svc) = fit.nonzero_counts();
        Estimate {
            fixed: spec
                .fixed
                .iter()
                .zip(&fit.params.mu)
                .map(|(name, &mean)| FixedEffect {
                    name: name.clone(),
                    mean,
                })
                .collect(),
            svc: spec
                .svc
                .iter()
                .zip(&fit.params.gp)
                .map(|(name, g)| SvcEstimate {
                    name: name.clone(),
                    range: g.range,
                    variance: g.variance,
                    range_identifiable: g.variance != 0.0,
                })
                .collect(),
            nugget: fit.params.nugget,
            loglik: fit.loglik,
            pen_loglik: fit.pen_loglik,
            bic: fit.bic,
            nonzero_fixed,
            nonzero_svc,
            lambda: fit.lambda.map(|(a, b)| [a, b]),
            iterations: fit.iterations,
            converged: fit.converged,
            evaluations: fit.evaluations,
            trace: fit.trace.clone(),
        }
    }

    pub fn params(&self) -> SvcParams {
        SvcParams::new(
            self.fixed.iter().map(|f| f.mean).collect(),
            self.svc.iter().map(|s| GpParams::new(s.range, s.variance)).collect(),
            self.nugget,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub command: String,
    pub model: ModelSpec,
    pub mle: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub n_init: usize,
    pub n_iter: usize,
    /// Lower corner `(λ_μ, λ_θ)` of the tuning box.
    pub lambda_lower: [f64; 2],
    pub lambda_upper: [f64; 2],
    pub seed: u64,
    pub best_index: usize,
    pub evaluations: Vec<MboEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOutput {
    pub command: String,
    pub model: ModelSpec,
    pub lambda_hat: [f64; 2],
    pub mle: Estimate,
    pub pmle: Estimate,
    pub tuning: Tuning,
}

/// Fields shared by `fit` and `select` outputs, enough to predict.
#[derive(Debug, Clone, Deserialize)]
pub struct SavedFit {
    pub model: ModelSpec,
    pub mle: Estimate,
    pub pmle: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub command: String,
    pub config: SimConfig,
    pub methods: Vec<String>,
    pub summary: StudySummary,
    pub failures: Vec<FailedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutput {
    pub command: String,
    pub model: ModelSpec,
    pub folds: usize,
    pub seed: u64,
    pub fold_sizes: Vec<usize>,
    pub results: Vec<CvResult>,
}

pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

pub fn write_csv(path: Option<&Path>, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}
