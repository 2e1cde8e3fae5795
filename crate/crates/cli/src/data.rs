use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use svcsel_core::{Dataset, KernelFamily, Locations};

use crate::error::CliError;

/// Column token standing for the intercept.
pub const INTERCEPT_TOKEN: &str = "1";
pub const INTERCEPT_NAME: &str = "(Intercept)";

/// A CSV file held as strings; columns are parsed on request.
pub struct Table {
    pub headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
    source: String,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let source = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("{source}: {e}")))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Input(format!("{source}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("{source}: {e}")))?;
        if rows.is_empty() {
            return Err(CliError::Input(format!("{source}: no data rows")));
        }
        Ok(Table { headers, rows, source })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("{}: column '{name}' not found", self.source)))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r.get(idx).unwrap_or("");
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(CliError::Input(format!(
                        "{}: column '{name}', data row {}: '{cell}' is not a finite number",
                        self.source,
                        i + 1
                    ))),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub sd: f64,
}

/// Column roles and preprocessing of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub fixed: Vec<String>,
    pub svc: Vec<String>,
    pub coords: Vec<String>,
    pub kernel: KernelFamily,
    pub min_range: f64,
    pub n: usize,
    /// Center and scale applied to each standardized column (`z = (v − mean) / sd`).
    pub standardization: BTreeMap<String, Scaling>,
}

fn display_name(token: &str) -> String {
    if token == INTERCEPT_TOKEN {
        INTERCEPT_NAME.to_string()
    } else {
        token.to_string()
    }
}

fn internal_name(name: &str) -> &str {
    if name == INTERCEPT_NAME {
        INTERCEPT_TOKEN
    } else {
        name
    }
}

/// Resolve column roles against the table and compute standardization constants.
pub fn resolve_spec(
    table: &Table,
    response: &str,
    fixed: Option<&[String]>,
    svc: Option<&[String]>,
    coords: &[String],
    standardize: &[String],
    kernel: KernelFamily,
) -> Result<ModelSpec, CliError> {
    if coords.is_empty() || coords.len() > 3 {
        return Err(CliError::Input(format!("expected 1 to 3 coordinate columns, got {}", coords.len())));
    }
    let fixed: Vec<String> = match fixed {
        Some(cols) => cols.to_vec(),
        None => std::iter::once(INTERCEPT_TOKEN.to_string())
            .chain(
                table
                    .headers
                    .iter()
                    .filter(|h| h.as_str() != response && !coords.contains(h))
                    .cloned(),
            )
            .collect(),
    };
    // `--svc ""` gives a model without spatially varying coefficients
    let svc: Vec<String> = match svc {
        Some(cols) => cols.iter().filter(|c| !c.is_empty()).cloned().collect(),
        None => fixed.clone(),
    };
    if fixed.is_empty() {
        return Err(CliError::Input("at least one fixed effect is required".into()));
    }
    for name in std::iter::once(&response.to_string()).chain(&fixed).chain(&svc).chain(coords).chain(standardize) {
        if name != INTERCEPT_TOKEN && !table.has(name) {
            return Err(CliError::Input(format!("column '{name}' not found in the data")));
        }
    }
    let mut standardization = BTreeMap::new();
    for name in standardize {
        if name == INTERCEPT_TOKEN {
            return Err(CliError::Input("the intercept cannot be standardized".into()));
        }
        let v = table.column(name)?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(CliError::Input(format!("column '{name}' is constant and cannot be standardized")));
        }
        standardization.insert(name.clone(), Scaling { mean, sd });
    }
    Ok(ModelSpec {
        response: response.to_string(),
        fixed: fixed.iter().map(|c| display_name(c)).collect(),
        svc: svc.iter().map(|c| display_name(c)).collect(),
        coords: coords.to_vec(),
        kernel,
        min_range: 0.0,
        n: table.len(),
        standardization,
    })
}

fn scaled_column(table: &Table, name: &str, spec: &ModelSpec) -> Result<Vec<f64>, CliError> {
    let raw = internal_name(name);
    if raw == INTERCEPT_TOKEN {
        return Ok(vec![1.0; table.len()]);
    }
    let mut v = table.column(raw)?;
    if let Some(s) = spec.standardization.get(raw) {
        for x in &mut v {
            *x = (*x - s.mean) / s.sd;
        }
    }
    Ok(v)
}

fn design(table: &Table, names: &[String], spec: &ModelSpec) -> Result<DMatrix<f64>, CliError> {
    let cols = names
        .iter()
        .map(|c| scaled_column(table, c, spec))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DMatrix::from_fn(table.len(), names.len(), |i, j| cols[j][i]))
}

pub fn locations(table: &Table, spec: &ModelSpec) -> Result<Locations, CliError> {
    let cols = spec
        .coords
        .iter()
        .map(|c| scaled_column(table, c, spec))
        .collect::<Result<Vec<_>, _>>()?;
    let d = cols.len();
    let coords = (0..table.len()).flat_map(|i| cols.iter().map(move |c| c[i])).collect::<Vec<_>>();
    Locations::new(d, coords).map_err(|e| CliError::Input(e.to_string()))
}

/// Training dataset in the (possibly standardized) model scale.
pub fn build_dataset(table: &Table, spec: &ModelSpec) -> Result<Dataset, CliError> {
    let y = DVector::from_vec(scaled_column(table, &spec.response, spec)?);
    let x = design(table, &spec.fixed, spec)?;
    let w = design(table, &spec.svc, spec)?;
    Dataset::new(y, x, w, locations(table, spec)?).map_err(|e| CliError::Input(e.to_string()))
}

/// Locations and design matrices of new observations (no response needed).
pub fn new_design(table: &Table, spec: &ModelSpec) -> Result<(Locations, DMatrix<f64>, DMatrix<f64>), CliError> {
    Ok((locations(table, spec)?, design(table, &spec.fixed, spec)?, design(table, &spec.svc, spec)?))
}

/// Write a dataset as CSV with coordinates `s1..`, covariates `x1..` and response `y`;
/// floats use the shortest representation that round-trips.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let d = data.locations.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("s{i}")).collect();
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    header.push("y".into());
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(io)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.locations.point(i).iter().map(|v| format!("{v:?}")).collect();
        rec.extend((0..data.p()).map(|j| format!("{:?}", data.x[(i, j)])));
        rec.push(format!("{:?}", data.y[i]));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
