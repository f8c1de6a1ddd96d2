//! Correlation study over random evaluation points.
//!
//! Points are drawn i.i.d. from `N(0, I)`, every measure is computed at each
//! point, and the per-point table is reduced to a Pearson correlation matrix
//! over the headline metrics plus log-linear fits `y = alpha + beta ln x`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_point, AnalysisConfig, PointAnalysis};
use crate::error::{Error, Result};
use crate::format::{fmt_f64, to_json};
use crate::model::{EvalPoint, Model, ModelSpec};
use crate::sampling::{derive_seed, sample_unit_normal_points, stream};

/// Default floor applied before taking logarithms.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;
/// Default number of evaluation points.
pub const DEFAULT_POINTS: usize = 200;
/// Largest tolerated fraction of failed points.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

/// Columns of the correlation matrix, in order.
pub const CORRELATION_METRICS: [&str; 7] = [
    "lipschitz",
    "jaccard_topk",
    "hessian_mag",
    "hessian_cpl",
    "hessian_overall",
    "conformal_sd",
    "log_local_linear_rmse",
];

/// `(x_metric, y_metric)` of the two headline log-linear fits.
pub const CANONICAL_FITS: [(&str, &str); 2] = [
    ("local_linear_rmse", "hessian_mag"),
    ("conformal_sd", "lipschitz"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub model: ModelSpec,
    pub n_points: usize,
    pub analysis: AnalysisConfig,
    pub seed: u64,
    pub log_floor: f64,
}

impl StudyConfig {
    pub fn new(model: ModelSpec, seed: u64) -> Self {
        StudyConfig {
            model,
            n_points: DEFAULT_POINTS,
            analysis: AnalysisConfig::default(),
            seed,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_points < 10 {
            return Err(Error::config(format!(
                "a study needs at least 10 points, got {}",
                self.n_points
            )));
        }
        if !(self.log_floor.is_finite() && self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be finite and positive"));
        }
        self.analysis.validate(self.model.dimension)
    }

    fn point_config(&self, index: usize) -> AnalysisConfig {
        AnalysisConfig {
            seed: self.seed,
            ..self.analysis.clone()
        }
        .for_point(index)
    }
}

/// One row of the per-point table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub index: usize,
    pub point: EvalPoint,
    pub forecast: f64,
    pub local_linear_rmse: f64,
    pub conformal_sd: f64,
    pub conformal_iqr: f64,
    pub conformal_range: f64,
    pub conformal_q05: f64,
    pub conformal_q95: f64,
    pub lipschitz_surrogate: f64,
    pub lipschitz_fd_mean: f64,
    pub lipschitz_fd_max: f64,
    pub jaccard_avg: f64,
    pub hessian_mag: f64,
    pub hessian_mag_stability: f64,
    pub hessian_cpl: f64,
    pub hessian_cpl_stability: f64,
    pub hessian_overall: f64,
    pub hessian_degenerate: bool,
}

impl PointRecord {
    pub fn from_analysis(index: usize, a: &PointAnalysis) -> Self {
        let (u, i) = (&a.uncertainty, &a.instability);
        PointRecord {
            index,
            point: a.point.clone(),
            forecast: a.forecast,
            local_linear_rmse: u.local_linear_rmse,
            conformal_sd: u.conformal_sd,
            conformal_iqr: u.conformal_iqr,
            conformal_range: u.conformal_range,
            conformal_q05: u.conformal_q05,
            conformal_q95: u.conformal_q95,
            lipschitz_surrogate: i.lipschitz_surrogate,
            lipschitz_fd_mean: i.lipschitz_fd_mean,
            lipschitz_fd_max: i.lipschitz_fd_max,
            jaccard_avg: i.jaccard_avg,
            hessian_mag: i.hessian_mag,
            hessian_mag_stability: i.hessian_mag_stability,
            hessian_cpl: i.hessian_cpl,
            hessian_cpl_stability: i.hessian_cpl_stability,
            hessian_overall: i.hessian_overall,
            hessian_degenerate: i.hessian_degenerate,
        }
    }

    /// Value of a named metric; `log_local_linear_rmse` is floored at
    /// `log_floor` before the logarithm.
    pub fn metric(&self, name: &str, log_floor: f64) -> Option<f64> {
        Some(match name {
            "forecast" => self.forecast,
            "local_linear_rmse" => self.local_linear_rmse,
            "log_local_linear_rmse" => self.local_linear_rmse.max(log_floor).ln(),
            "conformal_sd" => self.conformal_sd,
            "conformal_iqr" => self.conformal_iqr,
            "conformal_range" => self.conformal_range,
            "conformal_q05" => self.conformal_q05,
            "conformal_q95" => self.conformal_q95,
            "lipschitz" | "lipschitz_fd_mean" => self.lipschitz_fd_mean,
            "lipschitz_fd_max" => self.lipschitz_fd_max,
            "lipschitz_surrogate" => self.lipschitz_surrogate,
            "jaccard_topk" | "jaccard_avg" => self.jaccard_avg,
            "hessian_mag" => self.hessian_mag,
            "hessian_mag_stability" => self.hessian_mag_stability,
            "hessian_cpl" => self.hessian_cpl,
            "hessian_cpl_stability" => self.hessian_cpl_stability,
            "hessian_overall" => self.hessian_overall,
            _ => return None,
        })
    }
}

fn is_hessian_metric(name: &str) -> bool {
    name.starts_with("hessian_")
}

/// A point that could not be analyzed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub index: usize,
    pub message: String,
}

/// Symmetric correlation matrix; `None` marks undefined entries (a column
/// with zero variance or too few usable rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }
}

/// `y = alpha + beta ln(max(x, floor))` fitted by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub x_metric: String,
    pub y_metric: String,
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub model: String,
    pub dimension: usize,
    pub seed: u64,
    pub log_floor: f64,
    pub per_point: Vec<PointRecord>,
    pub failures: Vec<PointFailure>,
    /// Points whose Hessian columns are excluded from correlations.
    pub hessian_degenerate: usize,
    pub correlations: CorrelationMatrix,
    pub fits: Vec<FitRecord>,
}

impl StudyResult {
    pub fn excluded(&self) -> usize {
        self.failures.len()
    }

    /// Column of a named metric over all retained points.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        column(&self.per_point, name, self.log_floor)
    }

    pub fn fit(&self, x_metric: &str, y_metric: &str) -> Option<&FitRecord> {
        self.fits
            .iter()
            .find(|f| f.x_metric == x_metric && f.y_metric == y_metric)
    }

    /// Fixed-width rendering of the correlation matrix and fit summaries.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model {} (N = {}), {} points, {} excluded, {} hessian-degenerate",
            self.model,
            self.dimension,
            self.per_point.len(),
            self.failures.len(),
            self.hessian_degenerate
        );
        let _ = write!(out, "{:<24}", "");
        for n in &self.correlations.names {
            let _ = write!(out, " {:>12}", abbreviate(n));
        }
        out.push('\n');
        for (name, row) in self.correlations.names.iter().zip(&self.correlations.values) {
            let _ = write!(out, "{name:<24}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {v:>12.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "undef");
                    }
                }
            }
            out.push('\n');
        }
        for f in &self.fits {
            let _ = writeln!(
                out,
                "fit {} = alpha + beta ln({}): alpha {:.4}, beta {:.4}, R^2 {:.4}",
                f.y_metric, f.x_metric, f.alpha, f.beta, f.r_squared
            );
        }
        out
    }
}

fn abbreviate(name: &str) -> String {
    match name {
        "log_local_linear_rmse" => "log_ll_rmse".into(),
        "hessian_overall" => "hess_overall".into(),
        other => other.into(),
    }
}

fn column(records: &[PointRecord], name: &str, log_floor: f64) -> Option<Vec<f64>> {
    records.iter().map(|r| r.metric(name, log_floor)).collect()
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewSamples {
            required: 3,
            actual: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::UndefinedCorrelation("first series has zero variance"));
    }
    if syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("second series has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least squares of `ys` on `ln(max(xs, log_floor))`.
pub fn fit_log_linear(xs: &[f64], ys: &[f64], log_floor: f64) -> Result<LogLinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewSamples {
            required: 3,
            actual: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit input"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.max(log_floor).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in lx.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::DegenerateRegressor("log regressor is constant"));
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let r_squared = if syy > 0.0 {
        let ss_res: f64 = lx
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - alpha - beta * x).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(LogLinearFit {
        alpha,
        beta,
        r_squared,
        n: lx.len(),
    })
}

/// Correlations between named metric columns over `records`.
///
/// Pairs involving a Hessian column skip rows whose Hessian decomposition was
/// degenerate. The diagonal is exactly 1 for columns with positive variance.
pub fn correlation_matrix(records: &[PointRecord], names: &[&str], log_floor: f64) -> CorrelationMatrix {
    let n = names.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let skip_degenerate = is_hessian_metric(names[i]) || is_hessian_metric(names[j]);
            let rows: Vec<&PointRecord> = records
                .iter()
                .filter(|r| !(skip_degenerate && r.hessian_degenerate))
                .collect();
            let xs: Option<Vec<f64>> = rows.iter().map(|r| r.metric(names[i], log_floor)).collect();
            let ys: Option<Vec<f64>> = rows.iter().map(|r| r.metric(names[j], log_floor)).collect();
            let r = match (xs, ys) {
                (Some(xs), Some(ys)) => pearson_correlation(&xs, &ys).ok(),
                _ => None,
            };
            let r = if i == j { r.map(|_| 1.0) } else { r };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    CorrelationMatrix {
        names: names.iter().map(|s| s.to_string()).collect(),
        values,
    }
}

/// Log-linear fit of `y_metric` on `x_metric` over `records`.
pub fn fit_metrics(
    records: &[PointRecord],
    x_metric: &str,
    y_metric: &str,
    log_floor: f64,
) -> Result<FitRecord> {
    let skip_degenerate = is_hessian_metric(x_metric) || is_hessian_metric(y_metric);
    let rows: Vec<&PointRecord> = records
        .iter()
        .filter(|r| !(skip_degenerate && r.hessian_degenerate))
        .collect();
    let get = |name: &str| -> Result<Vec<f64>> {
        rows.iter()
            .map(|r| r.metric(name, log_floor))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::config(format!("unknown metric `{name}`")))
    };
    let fit = fit_log_linear(&get(x_metric)?, &get(y_metric)?, log_floor)?;
    Ok(FitRecord {
        x_metric: x_metric.to_string(),
        y_metric: y_metric.to_string(),
        alpha: fit.alpha,
        beta: fit.beta,
        r_squared: fit.r_squared,
        n: fit.n,
    })
}

/// Runs the study. Points are processed in parallel on the current rayon
/// pool; results are identical for any thread count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let model = cfg.model.instantiate()?;
    run_study_with(&model, cfg)
}

/// As [`run_study`] with an already-instantiated model.
pub fn run_study_with<M: Model + ?Sized>(model: &M, cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let dim = cfg.model.dimension;
    let points = sample_unit_normal_points(dim, cfg.n_points, derive_seed(cfg.seed, &[stream::EVAL_POINTS]));
    let outcomes: Vec<Result<PointAnalysis>> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| analyze_point(model, x, &cfg.point_config(i)))
        .collect();

    let mut per_point = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(a) => per_point.push(PointRecord::from_analysis(i, &a)),
            Err(e) => failures.push(PointFailure {
                index: i,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * cfg.n_points as f64 {
        return Err(Error::StudyAborted {
            failed: failures.len(),
            total: cfg.n_points,
        });
    }
    Ok(assemble(
        cfg.model.kind.name().to_string(),
        dim,
        cfg.seed,
        cfg.log_floor,
        per_point,
        failures,
    ))
}

fn assemble(
    model: String,
    dimension: usize,
    seed: u64,
    log_floor: f64,
    per_point: Vec<PointRecord>,
    failures: Vec<PointFailure>,
) -> StudyResult {
    let correlations = correlation_matrix(&per_point, &CORRELATION_METRICS, log_floor);
    let fits = CANONICAL_FITS
        .iter()
        .filter_map(|(x, y)| fit_metrics(&per_point, x, y, log_floor).ok())
        .collect();
    StudyResult {
        model,
        dimension,
        seed,
        log_floor,
        hessian_degenerate: per_point.iter().filter(|r| r.hessian_degenerate).count(),
        per_point,
        failures,
        correlations,
        fits,
    }
}

/// Concatenates the tables of several studies and recomputes correlations
/// and fits over the pooled rows.
pub fn pool_results(results: &[StudyResult]) -> StudyResult {
    let mut per_point = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        per_point.extend(r.per_point.iter().cloned());
        failures.extend(r.failures.iter().cloned());
    }
    let log_floor = results.first().map_or(DEFAULT_LOG_FLOOR, |r| r.log_floor);
    let names: Vec<&str> = results.iter().map(|r| r.model.as_str()).collect();
    assemble(
        format!("pooled({})", names.join("+")),
        results.iter().map(|r| r.dimension).max().unwrap_or(0),
        results.first().map_or(0, |r| r.seed),
        log_floor,
        per_point,
        failures,
    )
}

const PER_POINT_COLUMNS: [&str; 18] = [
    "forecast",
    "local_linear_rmse",
    "log_local_linear_rmse",
    "conformal_sd",
    "conformal_iqr",
    "conformal_range",
    "conformal_q05",
    "conformal_q95",
    "lipschitz_surrogate",
    "lipschitz_fd_mean",
    "lipschitz_fd_max",
    "jaccard_avg",
    "hessian_mag",
    "hessian_mag_stability",
    "hessian_cpl",
    "hessian_cpl_stability",
    "hessian_overall",
    "hessian_degenerate",
];

/// The per-point table as CSV text.
pub fn per_point_csv(result: &StudyResult) -> String {
    let mut out = String::from("index");
    for j in 0..result.dimension {
        let _ = write!(out, ",x{j}");
    }
    for c in PER_POINT_COLUMNS {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for r in &result.per_point {
        let _ = write!(out, "{}", r.index);
        for v in r.point.coords() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for c in PER_POINT_COLUMNS {
            if c == "hessian_degenerate" {
                let _ = write!(out, ",{}", u8::from(r.hessian_degenerate));
            } else {
                let v = r.metric(c, result.log_floor).expect("known column");
                let _ = write!(out, ",{}", fmt_f64(v));
            }
        }
        out.push('\n');
    }
    out
}

/// The correlation matrix as CSV text with header row and column;
/// undefined entries are written as `NaN`.
pub fn correlations_csv(m: &CorrelationMatrix) -> String {
    let mut out = String::from("metric");
    for n in &m.names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (name, row) in m.names.iter().zip(&m.values) {
        out.push_str(name);
        for v in row {
            let _ = write!(out, ",{}", fmt_f64(v.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Sidecar path for a scatter file: `foo.csv` becomes `foo.fit.json`.
pub fn scatter_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("fit.json")
}

#[derive(Serialize)]
struct ScatterSidecar<'a> {
    x_metric: &'a str,
    y_metric: &'a str,
    model: &'a str,
    log_floor: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
    r_squared: Option<f64>,
    n: usize,
}

/// Writes `x_metric,y_metric` pairs as CSV and the log-linear fit of
/// `y_metric` on `x_metric` to a JSON sidecar next to it.
pub fn emit_scatter(result: &StudyResult, x_metric: &str, y_metric: &str, path: &Path) -> Result<()> {
    let xs = result
        .column(x_metric)
        .ok_or_else(|| Error::config(format!("unknown metric `{x_metric}`")))?;
    let ys = result
        .column(y_metric)
        .ok_or_else(|| Error::config(format!("unknown metric `{y_metric}`")))?;
    let mut csv = format!("{x_metric},{y_metric}\n");
    for (x, y) in xs.iter().zip(&ys) {
        let _ = writeln!(csv, "{},{}", fmt_f64(*x), fmt_f64(*y));
    }
    write_file(path, &csv)?;
    let fit = fit_metrics(&result.per_point, x_metric, y_metric, result.log_floor).ok();
    let sidecar = ScatterSidecar {
        x_metric,
        y_metric,
        model: &result.model,
        log_floor: result.log_floor,
        alpha: fit.as_ref().map(|f| f.alpha),
        beta: fit.as_ref().map(|f| f.beta),
        r_squared: fit.as_ref().map(|f| f.r_squared),
        n: fit.as_ref().map_or(xs.len(), |f| f.n),
    };
    let mut json = to_json(&sidecar, Some(2))?;
    json.push('\n');
    write_file(&scatter_sidecar_path(path), &json)
}

/// File name of the scatter data for a fit.
pub fn scatter_file_name(x_metric: &str, y_metric: &str) -> String {
    format!("scatter_{y_metric}_vs_{x_metric}.csv")
}

#[derive(Serialize)]
struct FitsDocument<'a> {
    model: &'a str,
    dimension: usize,
    seed: u64,
    points: usize,
    excluded: usize,
    hessian_degenerate: usize,
    log_floor: f64,
    failures: &'a [PointFailure],
    fits: &'a [FitRecord],
}

/// Writes `per_point.csv`, `correlations.csv`, `fits.json` and one scatter
/// CSV (plus sidecar) per canonical fit into `dir`. Returns the paths.
pub fn write_study_outputs(result: &StudyResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let per_point = dir.join("per_point.csv");
    write_file(&per_point, &per_point_csv(result))?;
    written.push(per_point);
    let corr = dir.join("correlations.csv");
    write_file(&corr, &correlations_csv(&result.correlations))?;
    written.push(corr);
    let fits = dir.join("fits.json");
    let doc = FitsDocument {
        model: &result.model,
        dimension: result.dimension,
        seed: result.seed,
        points: result.per_point.len(),
        excluded: result.excluded(),
        hessian_degenerate: result.hessian_degenerate,
        log_floor: result.log_floor,
        failures: &result.failures,
        fits: &result.fits,
    };
    let mut json = to_json(&doc, Some(2))?;
    json.push('\n');
    write_file(&fits, &json)?;
    written.push(fits);
    for (x, y) in CANONICAL_FITS {
        let path = dir.join(scatter_file_name(x, y));
        emit_scatter(result, x, y, &path)?;
        written.push(scatter_sidecar_path(&path));
        written.push(path);
    }
    Ok(written)
}
