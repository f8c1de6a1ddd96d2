//! Reading model specs, policies, fallback models and point files.

use std::fs;
use std::path::Path;

use fxstab::{fit_fallback, AnalysisConfig, Error, EvalPoint, FallbackModel, GatePolicy, ModelKind, ModelSpec, Result};

use crate::{ModelArgs, SamplingArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn located(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::Config(format!("{}: {other}", path.display())),
    }
}

/// A JSON spec file when `model` names an existing file, else a built-in.
pub fn load_model(args: &ModelArgs) -> Result<ModelSpec> {
    let path = Path::new(&args.model);
    if path.is_file() {
        if args.dimension.is_some() {
            return Err(Error::Config(
                "--dimension applies only to built-in models".into(),
            ));
        }
        return ModelSpec::from_json(&read(path)?).map_err(|e| match e {
            Error::ModelSpec { .. } | Error::Json(_) => located(path, e),
            other => other,
        });
    }
    let kind = ModelKind::parse(&args.model)
        .filter(|k| ModelKind::BUILTIN.contains(k))
        .ok_or_else(|| {
            Error::Config(format!(
                "`{}` is neither a model file nor a built-in model (wavelike, radial, sigmoid_network, piecewise_linear, linear)",
                args.model
            ))
        })?;
    ModelSpec::builtin(kind, args.dimension.unwrap_or(kind.default_dimension()), args.model_seed)
}

pub fn analysis_config(args: &SamplingArgs, seed: u64) -> AnalysisConfig {
    AnalysisConfig {
        sigma_pert: args.sigma_pert,
        kernel_sigma: args.kernel_sigma,
        samples: args.samples,
        replicates: args.replicates,
        conformal_samples: args.conformal_samples.unwrap_or(args.replicates),
        topk: args.topk,
        seed,
    }
}

pub fn load_policy(path: &Path) -> Result<GatePolicy> {
    GatePolicy::from_json(&read(path)?).map_err(|e| located(path, e))
}

/// Numeric CSV rows. A first line that does not parse is taken as a header.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if n == 0 => continue,
            Err(e) => {
                return Err(Error::Config(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    if let Some(first) = rows.first() {
        let width = first.len();
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::Config(format!(
                "{}: data row {} has {} columns, expected {width}",
                path.display(),
                i,
                rows[i].len()
            )));
        }
    }
    Ok(rows)
}

pub fn read_points(path: &Path, dim: usize) -> Result<Vec<EvalPoint>> {
    read_rows(path)?
        .into_iter()
        .map(|row| {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: row.len(),
                });
            }
            EvalPoint::new(row)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| located(path, e))
}

/// A fallback document (`.json`) or training rows to fit one on (`.csv`).
pub fn load_fallback(path: &Path) -> Result<FallbackModel> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return FallbackModel::from_json(&read(path)?).map_err(|e| located(path, e));
    }
    let rows = read_rows(path)?;
    if rows.first().is_some_and(|r| r.len() < 2) {
        return Err(Error::Config(format!(
            "{}: training rows need at least one feature column and a target column",
            path.display()
        )));
    }
    let (features, targets): (Vec<Vec<f64>>, Vec<f64>) = rows
        .into_iter()
        .map(|mut r| {
            let t = r.pop().unwrap_or(f64::NAN);
            (r, t)
        })
        .unzip();
    fit_fallback(&features, &targets).map_err(|e| located(path, e))
}
