use std::path::Path;
use std::result::Result;

use svcsel_core::mbo::LambdaBounds;
use svcsel_core::predict::AlassoOptions;
use svcsel_core::*;

use crate::args::*;
use crate::data::{self, ModelSpec, Table};
use crate::error::{CliError, Status};
use crate::output::*;

pub fn run(cli: &Cli, parallel: bool) -> Result<Status, CliError> {
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Select(a) => select(a, parallel),
        Command::Simulate(a) => simulate(a, parallel),
        Command::Cv(a) => cv(a, parallel),
        Command::Predict(a) => predict_cmd(a),
    }
}

struct Prepared {
    spec: ModelSpec,
    data: Dataset,
}

fn prepare(a: &DataArgs) -> Result<Prepared, CliError> {
    let table = Table::read(&a.data)?;
    let mut spec = data::resolve_spec(
        &table,
        &a.response,
        a.fixed.as_deref(),
        a.svc.as_deref(),
        &a.coords,
        &a.standardize,
        a.kernel.into(),
    )?;
    let data = data::build_dataset(&table, &spec)?;
    spec.min_range = match a.min_range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(CliError::Input(format!("--min-range must be positive, got {r}"))),
        None => default_min_range(&data.locations),
    };
    Ok(Prepared { spec, data })
}

fn fit_options(cd: &CdArgs) -> Result<FitOptions, CliError> {
    let cfg = CdConfig {
        delta: cd.delta,
        t_max: cd.t_max,
    };
    cfg.validate()?;
    Ok(FitOptions {
        cd: cfg,
        ..FitOptions::default()
    })
}

fn tune_config(t: &TuneArgs, seed: u64, parallel: bool) -> Result<TuneConfig, CliError> {
    let cfg = TuneConfig {
        bounds: LambdaBounds::new(t.lambda_bounds[0], t.lambda_bounds[1])?,
        n_init: t.n_init,
        n_iter: t.n_iter,
        seed,
        parallel,
        ..TuneConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_of<'a>(p: &'a Prepared) -> Result<SvcModel<'a>, CliError> {
    let aniso = AnisotropyMatrix::identity(p.data.locations.dim());
    Ok(SvcModel::new(&p.data, KernelSpec::new(p.spec.kernel), aniso)?)
}

fn run_mle(p: &Prepared, model: &SvcModel<'_>, opts: &FitOptions) -> Result<FitResult, CliError> {
    let bounds = default_bounds(p.data.q(), p.spec.min_range);
    let theta0 = default_theta_init(&p.data, &bounds);
    Ok(fit_mle_with(model, &bounds, &theta0, opts)?)
}

fn fit(a: &FitArgs) -> Result<Status, CliError> {
    let p = prepare(&a.data)?;
    let opts = fit_options(&a.cd)?;
    let model = model_of(&p)?;
    let mle = run_mle(&p, &model, &opts)?;
    let out = FitOutput {
        command: "fit".into(),
        mle: Estimate::new(&mle, &p.spec),
        model: p.spec.clone(),
    };
    write_json(&out, a.out.as_deref())?;
    Ok(if mle.converged { Status::Success } else { Status::NotConverged })
}

fn select(a: &SelectArgs, parallel: bool) -> Result<Status, CliError> {
    let p = prepare(&a.data)?;
    let opts = fit_options(&a.cd)?;
    let tune_cfg = tune_config(&a.tune, a.seed, parallel)?;
    let model = model_of(&p)?;
    let mle = run_mle(&p, &model, &opts)?;
    let bounds = default_bounds(p.data.q(), p.spec.min_range);
    let tuned = tune_shrinkage(&model, &bounds, &mle, &opts, &tune_cfg)?;
    let out = SelectOutput {
        command: "select".into(),
        lambda_hat: [tuned.lambda_hat.0, tuned.lambda_hat.1],
        mle: Estimate::new(&mle, &p.spec),
        pmle: Estimate::new(&tuned.best_fit, &p.spec),
        tuning: Tuning {
            n_init: tune_cfg.n_init,
            n_iter: tune_cfg.n_iter,
            lambda_lower: [tune_cfg.bounds.lower.0, tune_cfg.bounds.lower.1],
            lambda_upper: [tune_cfg.bounds.upper.0, tune_cfg.bounds.upper.1],
            seed: a.seed,
            best_index: tuned.best_index,
            evaluations: tuned.trace,
        },
        model: p.spec.clone(),
    };
    write_json(&out, a.out.as_deref())?;
    Ok(if mle.converged && tuned.best_fit.converged {
        Status::Success
    } else {
        Status::NotConverged
    })
}

fn parse_methods<T>(names: &[String], parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    if names.is_empty() {
        return Err(CliError::Input("no methods requested".into()));
    }
    names
        .iter()
        .map(|n| parse(n).ok_or_else(|| CliError::Input(format!("unknown method '{n}'"))))
        .collect()
}

fn study_method(name: &str) -> Option<Method> {
    match name.to_ascii_uppercase().as_str() {
        "MLE" => Some(Method::Mle),
        "PMLE" => Some(Method::Pmle),
        "ORACLE" => Some(Method::Oracle),
        _ => None,
    }
}

fn simulate(a: &SimulateArgs, parallel: bool) -> Result<Status, CliError> {
    let methods = parse_methods(&a.methods, study_method)?;
    let cfg = SimConfig {
        m: a.grid,
        gamma: a.gamma,
        nugget: a.nugget,
        n_reps: a.reps,
        seed: a.seed,
        margin: a.margin,
        kernel: KernelSpec::new(a.kernel.into()),
        resample_covariates: !a.fixed_covariates,
        ..SimConfig::default()
    };
    cfg.validate()?;
    if cfg.n_reps == 0 {
        return Err(CliError::Input("--reps must be at least 1".into()));
    }
    let opts = StudyOptions {
        fit: fit_options(&a.cd)?,
        tune: tune_config(&a.tune, a.seed, parallel)?,
        parallel,
    };
    if let Some(dir) = &a.data_out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for rep in 0..cfg.n_reps {
            let (d, _) = generate_dataset(&cfg, rep)?;
            data::write_dataset(&dir.join(format!("rep_{rep:04}.csv")), &d)?;
        }
    }
    let result = run_study(&cfg, &methods, &opts)?;
    if let Some(path) = &a.rows {
        let header = StudyRow::csv_header(cfg.p(), cfg.true_gp.len());
        let rows: Vec<Vec<String>> = result.rows.iter().map(StudyRow::csv_record).collect();
        write_csv(Some(path), &header, &rows)?;
    }
    let all_failed = result.rows.is_empty();
    let out = SimulateOutput {
        command: "simulate".into(),
        config: cfg,
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        summary: result.summary,
        failures: result.failures,
    };
    write_json(&out, a.out.as_deref())?;
    if all_failed {
        return Err(CliError::Numerical("every replicate failed".into()));
    }
    Ok(Status::Success)
}

fn cv(a: &CvArgs, parallel: bool) -> Result<Status, CliError> {
    let methods = parse_methods(&a.methods, |n| n.parse::<CvMethod>().ok())?;
    let p = prepare(&a.data)?;
    let plan = FoldPlan::new(p.data.n(), a.folds, a.seed)?;
    let opts = CvOptions {
        spec: KernelSpec::new(p.spec.kernel),
        aniso: AnisotropyMatrix::identity(p.data.locations.dim()),
        min_range: p.spec.min_range,
        fit: fit_options(&a.cd)?,
        tune: tune_config(&a.tune, a.seed, parallel)?,
        alasso: AlassoOptions {
            inner_folds: a.alasso_folds,
            seed: a.seed,
            ..AlassoOptions::default()
        },
        parallel,
    };
    let results = methods
        .iter()
        .map(|&m| kfold_cv(&p.data, a.folds, m, a.seed, &opts))
        .collect::<svcsel_core::Result<Vec<_>>>()?;
    if let Some(path) = &a.folds_csv {
        let header: Vec<String> = ["fold", "method", "n_test", "rmse", "n_fixed", "n_random", "error"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows: Vec<Vec<String>> = results
            .iter()
            .flat_map(|r| {
                r.folds.iter().map(move |f| {
                    vec![
                        (f.fold + 1).to_string(),
                        r.method.name().to_string(),
                        f.n_test.to_string(),
                        f.rmse.map(|v| format!("{v:?}")).unwrap_or_default(),
                        opt(f.n_fixed),
                        opt(f.n_random),
                        f.error.clone().unwrap_or_default(),
                    ]
                })
            })
            .collect();
        write_csv(Some(path), &header, &rows)?;
    }
    let failed_method = results.iter().find(|r| r.n_failed == r.folds.len()).map(|r| r.method.name());
    let out = CvOutput {
        command: "cv".into(),
        model: p.spec.clone(),
        folds: a.folds,
        seed: a.seed,
        fold_sizes: plan.sizes(),
        results,
    };
    write_json(&out, a.out.as_deref())?;
    if let Some(m) = failed_method {
        return Err(CliError::Numerical(format!("every fold failed for {m}")));
    }
    Ok(Status::Success)
}

fn read_saved(path: &Path) -> Result<SavedFit, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn predict_cmd(a: &PredictArgs) -> Result<Status, CliError> {
    let saved = read_saved(&a.fit)?;
    let estimate = match (a.estimate, &saved.pmle) {
        (Some(EstimateChoice::Pmle), None) => {
            return Err(CliError::Input("the saved fit has no penalized estimate".into()))
        }
        (Some(EstimateChoice::Pmle), Some(e)) | (None, Some(e)) => e,
        (Some(EstimateChoice::Mle), _) | (None, None) => &saved.mle,
    };
    let spec = &saved.model;
    let train = data::build_dataset(&Table::read(&a.data)?, spec)?;
    if train.n() != spec.n {
        return Err(CliError::Input(format!(
            "training data has {} rows but the fit used {}",
            train.n(),
            spec.n
        )));
    }
    let new_table = Table::read(&a.new)?;
    let (locs, x_new, w_new) = data::new_design(&new_table, spec)?;
    let aniso = AnisotropyMatrix::identity(locs.dim());
    let pred = predict(&estimate.params(), &train, &KernelSpec::new(spec.kernel), &aniso, &locs, &x_new, &w_new)?;
    let raw_coords = spec
        .coords
        .iter()
        .map(|c| new_table.column(c))
        .collect::<Result<Vec<_>, _>>()?;
    let back = spec.standardization.get(&spec.response).copied();
    let mut header: Vec<String> = spec.coords.clone();
    header.push("prediction".into());
    if back.is_some() {
        header.push("prediction_original_scale".into());
    }
    let rows: Vec<Vec<String>> = (0..locs.len())
        .map(|i| {
            let mut r: Vec<String> = raw_coords.iter().map(|c| format!("{:?}", c[i])).collect();
            r.push(format!("{:?}", pred[i]));
            if let Some(s) = back {
                r.push(format!("{:?}", pred[i] * s.sd + s.mean));
            }
            r
        })
        .collect();
    write_csv(a.out.as_deref(), &header, &rows)?;
    Ok(Status::Success)
}
