use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svcsel_core::KernelFamily;

#[derive(Debug, Parser)]
#[command(name = "svcsel", version, about = "Variable selection for Gaussian-process SVC models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads (default: available parallelism; 1 runs everything serially).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Maximum likelihood fit.
    Fit(FitArgs),
    /// MLE, BIC-tuned shrinkage and the final penalized fit.
    Select(SelectArgs),
    /// Simulation study on perturbed grids.
    Simulate(SimulateArgs),
    /// k-fold cross-validation of ALASSO, MLE and PMLE.
    Cv(CvArgs),
    /// Predict at new locations from a saved fit.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kernel {
    Exp,
    Matern32,
    Matern52,
}

impl From<Kernel> for KernelFamily {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Exp => KernelFamily::Exponential,
            Kernel::Matern32 => KernelFamily::Matern32,
            Kernel::Matern52 => KernelFamily::Matern52,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub response: String,

    /// Fixed-effect columns; `1` is the intercept. Defaults to `1` plus every
    /// column that is neither the response nor a coordinate.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Option<Vec<String>>,

    /// Columns with a spatially varying coefficient; defaults to the fixed effects,
    /// an empty value fits none.
    #[arg(long, value_delimiter = ',')]
    pub svc: Option<Vec<String>>,

    /// Coordinate columns (1 to 3).
    #[arg(long, value_delimiter = ',', required = true)]
    pub coords: Vec<String>,

    /// Columns to center and scale to unit sample standard deviation before fitting.
    #[arg(long, value_delimiter = ',')]
    pub standardize: Vec<String>,

    #[arg(long, value_enum, default_value_t = Kernel::Exp)]
    pub kernel: Kernel,

    /// Lower bound for every range (default: a third of the mean nearest-neighbor distance).
    #[arg(long)]
    pub min_range: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CdArgs {
    /// Relative tolerance of the coordinate descent.
    #[arg(long, default_value_t = 1e-6)]
    pub delta: f64,

    /// Maximum number of coordinate-descent iterations.
    #[arg(long, default_value_t = 20)]
    pub t_max: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    /// Size of the initial Latin hypercube design.
    #[arg(long, default_value_t = 10)]
    pub n_init: usize,

    /// Number of expected-improvement infill steps.
    #[arg(long, default_value_t = 10)]
    pub n_iter: usize,

    /// Box for both shrinkage parameters.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1e-6, 1.0])]
    pub lambda_bounds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cd: CdArgs,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cd: CdArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of replicates.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Grid side; each replicate has grid² locations.
    #[arg(long, default_value_t = 15)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Correlation parameter of the covariates.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub nugget: f64,
    /// Margin inside each grid cell, as a fraction of the cell side.
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
    #[arg(long, value_enum, default_value_t = Kernel::Exp)]
    pub kernel: Kernel,
    /// Reuse the covariates of replicate 0 in every replicate.
    #[arg(long)]
    pub fixed_covariates: bool,
    #[arg(long, value_delimiter = ',', default_value = "MLE,PMLE,Oracle")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub cd: CdArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    /// Summary JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate results as CSV.
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Directory receiving one CSV per generated dataset.
    #[arg(long)]
    pub data_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cd: CdArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',', default_value = "ALASSO,MLE,PMLE")]
    pub methods: Vec<String>,
    /// Inner folds used to choose the ALASSO shrinkage.
    #[arg(long, default_value_t = 10)]
    pub alasso_folds: usize,
    /// Summary JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-fold results as CSV.
    #[arg(long)]
    pub folds_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimateChoice {
    Mle,
    Pmle,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// JSON written by `fit` or `select`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Training CSV the fit was computed on.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV with coordinates and covariates of the new locations.
    #[arg(long)]
    pub new: PathBuf,
    /// Which estimate to use (default: the penalized one when present).
    #[arg(long, value_enum)]
    pub estimate: Option<EstimateChoice>,
    /// Prediction CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
